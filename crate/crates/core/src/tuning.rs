//! CAB parameter selection: Chernoff exponent gamma, overflow target delta
//! and frame size T.

use std::collections::BTreeMap;

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::traffic::{CoflowModel, FlowSizeDistribution, Placement, TrafficMatrix};

#[derive(Debug, Error, PartialEq)]
pub enum TuningError {
    #[error("s = {s} lies outside the MGF domain [0, {sup})")]
    OutOfDomain { s: f64, sup: f64 },
    #[error("offered load rho = {0} must be < 1 for the overflow bound")]
    Supercritical(f64),
    #[error("invalid tuning input: {0}")]
    InvalidInput(String),
    #[error("frame-size iteration did not converge after {0} iterations")]
    NoConvergence(usize),
}

/// Largest s searched when maximizing f.
pub const GAMMA_SEARCH_CAP: f64 = 5.0;
/// Samples used by the Monte Carlo MGF fallback.
pub const MC_MGF_SAMPLES: usize = 1_000_000;
/// Relative standard error at which the Monte Carlo MGF domain is cut.
pub const MC_MGF_MAX_REL_SE: f64 = 0.05;

/// Moment generating function of the per-port coflow load B = sum_j X_ij.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PortLoadMgf {
    /// B is a sum of `count` i.i.d. geometric(p) entries on {0, 1, ...}.
    GeometricSum { p: f64, count: usize },
    /// B is the constant `load`.
    Deterministic { load: f64 },
    /// Pointwise worst case over lines, each line a sum of independent
    /// geometric entries with the listed parameters.
    GeometricLines { lines: Vec<Vec<f64>> },
    /// Empirical MGF from sampled loads, stored as (value, count) atoms.
    Empirical {
        atoms: Vec<(f64, u64)>,
        samples: u64,
        domain_sup: f64,
    },
}

impl PortLoadMgf {
    /// Closed form where the model has one, otherwise a Monte Carlo estimate
    /// from `MC_MGF_SAMPLES` draws of a port load.
    pub fn for_model<R: Rng + ?Sized>(model: &CoflowModel, rng: &mut R) -> Self {
        let n = model.n;
        match (&model.placement, model.flow) {
            (Placement::NonUniform { means }, _) => {
                let p = |m: f64| m / (m + 1.0);
                let mut lines = Vec::with_capacity(2 * n);
                for i in 0..n {
                    lines.push((0..n).map(|j| p(means[i * n + j])).filter(|&q| q > 0.0).collect());
                    lines.push((0..n).map(|r| p(means[r * n + i])).filter(|&q| q > 0.0).collect());
                }
                PortLoadMgf::GeometricLines { lines }
            }
            (_, FlowSizeDistribution::Zero) => PortLoadMgf::Deterministic { load: 0.0 },
            (Placement::UniformDense, FlowSizeDistribution::Deterministic { value }) => {
                PortLoadMgf::Deterministic {
                    load: value as f64 * n as f64,
                }
            }
            (Placement::Diagonal, FlowSizeDistribution::Deterministic { value }) => {
                PortLoadMgf::Deterministic { load: value as f64 }
            }
            (placement, FlowSizeDistribution::Geometric { .. }) => PortLoadMgf::GeometricSum {
                p: model.flow.geometric_p().unwrap(),
                count: if matches!(placement, Placement::Diagonal) { 1 } else { n },
            },
            (placement, flow) => {
                let count = if matches!(placement, Placement::Diagonal) { 1 } else { n };
                PortLoadMgf::monte_carlo(MC_MGF_SAMPLES, rng, |rng| {
                    (0..count).map(|_| flow.sample(rng) as f64).sum()
                })
            }
        }
    }

    /// Empirical MGF of `samples` draws from `draw`.
    pub fn monte_carlo<R, F>(samples: usize, rng: &mut R, mut draw: F) -> Self
    where
        R: Rng + ?Sized,
        F: FnMut(&mut R) -> f64,
    {
        let mut hist: BTreeMap<u64, u64> = BTreeMap::new();
        for _ in 0..samples {
            *hist.entry(draw(rng).to_bits()).or_default() += 1;
        }
        let atoms: Vec<(f64, u64)> = hist.into_iter().map(|(b, c)| (f64::from_bits(b), c)).collect();
        Self::from_atoms(atoms)
    }

    /// Empirical MGF of the given (value, count) atoms. The domain is cut
    /// where the estimator's relative standard error exceeds
    /// `MC_MGF_MAX_REL_SE`.
    pub fn from_atoms(atoms: Vec<(f64, u64)>) -> Self {
        let samples: u64 = atoms.iter().map(|a| a.1).sum();
        let mut mgf = PortLoadMgf::Empirical {
            atoms,
            samples,
            domain_sup: f64::INFINITY,
        };
        let rel_se = |s: f64| mgf.empirical_rel_se(s);
        let sup = if rel_se(GAMMA_SEARCH_CAP) <= MC_MGF_MAX_REL_SE {
            f64::INFINITY
        } else {
            let (mut lo, mut hi) = (0.0, GAMMA_SEARCH_CAP);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if rel_se(mid) <= MC_MGF_MAX_REL_SE {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            hi
        };
        if let PortLoadMgf::Empirical { domain_sup, .. } = &mut mgf {
            *domain_sup = sup;
        }
        mgf
    }

    fn empirical_rel_se(&self, s: f64) -> f64 {
        let PortLoadMgf::Empirical { atoms, samples, .. } = self else {
            return 0.0;
        };
        let m = *samples as f64;
        let shift = atoms.iter().map(|a| s * a.0).fold(0.0f64, f64::max);
        let (mut e1, mut e2) = (0.0, 0.0);
        for &(b, c) in atoms {
            let w = (s * b - shift).exp();
            e1 += c as f64 * w;
            e2 += c as f64 * w * w;
        }
        e1 /= m;
        e2 /= m;
        ((e2 - e1 * e1).max(0.0) / m).sqrt() / e1
    }

    /// Supremum of the region where M_B is finite (or trusted).
    pub fn domain_sup(&self) -> f64 {
        match self {
            PortLoadMgf::GeometricSum { p, .. } => {
                if *p > 0.0 {
                    (1.0 / p).ln()
                } else {
                    f64::INFINITY
                }
            }
            PortLoadMgf::Deterministic { .. } => f64::INFINITY,
            PortLoadMgf::GeometricLines { lines } => lines
                .iter()
                .flatten()
                .fold(f64::INFINITY, |m, &p| m.min((1.0 / p).ln())),
            PortLoadMgf::Empirical { domain_sup, .. } => *domain_sup,
        }
    }

    /// E[B] = M_B'(0).
    pub fn mean(&self) -> f64 {
        match self {
            PortLoadMgf::GeometricSum { p, count } => *count as f64 * p / (1.0 - p),
            PortLoadMgf::Deterministic { load } => *load,
            PortLoadMgf::GeometricLines { lines } => lines
                .iter()
                .map(|l| l.iter().map(|p| p / (1.0 - p)).sum::<f64>())
                .fold(0.0, f64::max),
            PortLoadMgf::Empirical { atoms, samples, .. } => {
                atoms.iter().map(|&(b, c)| b * c as f64).sum::<f64>() / *samples as f64
            }
        }
    }

    /// M_B(s), or `None` outside [0, domain_sup).
    pub fn eval(&self, s: f64) -> Option<f64> {
        if !(s >= 0.0 && s < self.domain_sup()) {
            return None;
        }
        let geo = |p: f64| (1.0 - p) / (1.0 - p * s.exp());
        Some(match self {
            PortLoadMgf::GeometricSum { p, count } => geo(*p).powi(*count as i32),
            PortLoadMgf::Deterministic { load } => (load * s).exp(),
            PortLoadMgf::GeometricLines { lines } => lines
                .iter()
                .map(|l| l.iter().map(|&p| geo(p)).product::<f64>())
                .fold(1.0, f64::max),
            PortLoadMgf::Empirical { atoms, samples, .. } => {
                atoms.iter().map(|&(b, c)| c as f64 * (s * b).exp()).sum::<f64>() / *samples as f64
            }
        })
    }
}

/// f(s) = lambda (1 - M_B(s)) + s.
pub fn f_of_s(s: f64, lambda: f64, mgf: &PortLoadMgf) -> Result<f64, TuningError> {
    let m = mgf.eval(s).ok_or(TuningError::OutOfDomain {
        s,
        sup: mgf.domain_sup(),
    })?;
    Ok(lambda * (1.0 - m) + s)
}

/// Maximizer of f and where it was found.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaSolution {
    pub gamma: f64,
    pub s_opt: f64,
    /// The maximum sits at the search cap, so gamma is an artifact of the
    /// cap rather than a property of the traffic (happens as lambda -> 0).
    pub degenerate: bool,
}

/// Maximizes f over [0, min(domain_sup (1 - 1e-6), 5)] by a grid bracket
/// refined with golden-section search.
pub fn maximize_f(lambda: f64, mgf: &PortLoadMgf) -> Result<GammaSolution, TuningError> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(TuningError::InvalidInput(format!("lambda = {lambda}")));
    }
    let rho = lambda * mgf.mean();
    if rho >= 1.0 {
        return Err(TuningError::Supercritical(rho));
    }
    let upper = (mgf.domain_sup() * (1.0 - 1e-6)).min(GAMMA_SEARCH_CAP);
    let f = |s: f64| f_of_s(s, lambda, mgf).unwrap_or(f64::NEG_INFINITY);

    const GRID: usize = 400;
    let step = upper / GRID as f64;
    let (mut k_best, mut f_best) = (0usize, 0.0f64);
    for k in 1..=GRID {
        let v = f(k as f64 * step);
        if v > f_best {
            k_best = k;
            f_best = v;
        }
    }
    let mut lo = (k_best.saturating_sub(1)) as f64 * step;
    let mut hi = ((k_best + 1).min(GRID)) as f64 * step;
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - ratio * (hi - lo);
    let mut b = lo + ratio * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    for _ in 0..200 {
        if hi - lo <= 1e-13 * upper.max(1.0) {
            break;
        }
        if fa < fb {
            lo = a;
            a = b;
            fa = fb;
            b = lo + ratio * (hi - lo);
            fb = f(b);
        } else {
            hi = b;
            b = a;
            fb = fa;
            a = hi - ratio * (hi - lo);
            fa = f(a);
        }
    }
    let (mut s_opt, mut gamma) = if fa > fb { (a, fa) } else { (b, fb) };
    if f_best > gamma {
        s_opt = k_best as f64 * step;
        gamma = f_best;
    }
    let degenerate = upper >= GAMMA_SEARCH_CAP && s_opt >= upper * (1.0 - 1e-6);
    if degenerate {
        warn!("gamma maximum sits at the search cap s = {upper}");
    }
    Ok(GammaSolution {
        gamma,
        s_opt,
        degenerate,
    })
}

/// gamma = max_s f(s).
pub fn compute_gamma(lambda: f64, mgf: &PortLoadMgf) -> Result<f64, TuningError> {
    maximize_f(lambda, mgf).map(|g| g.gamma)
}

/// Consistent CAB parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CabParameters {
    pub gamma: f64,
    pub delta: f64,
    pub frame_size: u64,
}

impl CabParameters {
    /// delta N T (rho + 1)(1 + N T) - 1/2.
    pub fn residual(&self, n: usize, rho: f64) -> f64 {
        let nt = n as f64 * self.frame_size as f64;
        self.delta * nt * (rho + 1.0) * (1.0 + nt) - 0.5
    }
}

/// T = ceil(ln(2N / delta) / gamma), never below 2.
pub fn frame_size_for(gamma: f64, n: usize, delta: f64) -> u64 {
    let t = ((2.0 * n as f64 / delta).ln() / gamma).ceil();
    (t.max(2.0)) as u64
}

/// delta solving delta N T (rho + 1)(1 + N T) = 1/2 for a given T.
pub fn delta_for(t: u64, n: usize, rho: f64) -> f64 {
    let nt = n as f64 * t as f64;
    1.0 / (2.0 * nt * (rho + 1.0) * (1.0 + nt))
}

pub const SOLVE_MAX_ITERATIONS: usize = 1000;

/// Fixed point of T = ceil(ln(2N/delta)/gamma) and
/// delta N T (rho + 1)(1 + N T) = 1/2, starting from delta = 1/(2 N^2).
pub fn solve_delta_t(gamma: f64, n: usize, rho: f64) -> Result<CabParameters, TuningError> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(TuningError::InvalidInput(format!("gamma = {gamma}")));
    }
    if n == 0 {
        return Err(TuningError::InvalidInput("n = 0".into()));
    }
    if !(rho > 0.0) {
        return Err(TuningError::InvalidInput(format!("rho = {rho}")));
    }
    if rho >= 1.0 {
        return Err(TuningError::Supercritical(rho));
    }
    let mut t = frame_size_for(gamma, n, 1.0 / (2.0 * (n * n) as f64));
    // T -> ceil(ln(2N / delta(T)) / gamma) is nondecreasing in T, so the
    // iterates are monotone and stop at the first repeated value.
    let mut seen = Vec::new();
    for _ in 0..SOLVE_MAX_ITERATIONS {
        let delta = delta_for(t, n, rho);
        let next = frame_size_for(gamma, n, delta);
        if next == t {
            return Ok(CabParameters {
                gamma,
                delta,
                frame_size: t,
            });
        }
        if seen.contains(&next) {
            let t = next.max(t);
            return Ok(CabParameters {
                gamma,
                delta: delta_for(t, n, rho),
                frame_size: t,
            });
        }
        seen.push(t);
        t = next;
    }
    Err(TuningError::NoConvergence(SOLVE_MAX_ITERATIONS))
}

/// 2 n exp(-gamma t).
pub fn overflow_bound(n: usize, gamma: f64, t: u64) -> f64 {
    2.0 * n as f64 * (-gamma * t as f64).exp()
}

/// s* = (1 - rho) / (lambda (sigma2 + beta^2)) and gamma = f(s*) through
/// the exact MGF.
pub fn heavy_traffic_gamma(
    lambda: f64,
    beta: f64,
    sigma2: f64,
    mgf: &PortLoadMgf,
) -> Result<(f64, f64), TuningError> {
    let rho = lambda * beta;
    if rho >= 1.0 {
        return Err(TuningError::Supercritical(rho));
    }
    if !(lambda > 0.0) || !(beta > 0.0) || !(sigma2 >= 0.0) {
        return Err(TuningError::InvalidInput(format!(
            "lambda = {lambda}, beta = {beta}, sigma2 = {sigma2}"
        )));
    }
    let s_star = (1.0 - rho) / (lambda * (sigma2 + beta * beta));
    let gamma = f_of_s(s_star, lambda, mgf)?;
    Ok((s_star, gamma))
}

/// Tuned parameters for a model via the analytic route.
pub fn tune_model<R: Rng + ?Sized>(
    model: &CoflowModel,
    rng: &mut R,
) -> Result<CabParameters, TuningError> {
    let mgf = PortLoadMgf::for_model(model, rng);
    let gamma = compute_gamma(model.lambda, &mgf)?;
    solve_delta_t(gamma, model.n, model.rho())
}

/// Anything that can report an overflow frequency for a frame size.
pub trait OverflowProbe {
    fn overflow_frequency(&mut self, frame_size: u64) -> f64;
}

/// Samples whole-frame aggregate matrices L directly and reports how often
/// clearance_time(L) >= T.
///
/// For uniform geometric traffic, conditioned on K coflows in the frame,
/// each L_ij is a sum of K geometric(p) values, i.e. negative binomial; it is
/// drawn as Poisson(Gamma(K, p / (1 - p))). Other models sum K sampled
/// demand matrices.
pub struct FrameOverflowSampler<R: Rng> {
    pub model: CoflowModel,
    pub frames: u64,
    pub rng: R,
}

impl<R: Rng> FrameOverflowSampler<R> {
    pub fn new(model: CoflowModel, frames: u64, rng: R) -> Self {
        FrameOverflowSampler { model, frames, rng }
    }

    /// Line sums of one frame's aggregate traffic; returns its clearance time.
    pub fn sample_frame_clearance(&mut self, frame_size: u64) -> u64 {
        let n = self.model.n;
        let mean_count = self.model.lambda * frame_size as f64;
        let k = if mean_count > 0.0 {
            Poisson::new(mean_count).unwrap().sample(&mut self.rng) as u64
        } else {
            0
        };
        if k == 0 {
            return 0;
        }
        let mut rows = vec![0u64; n];
        let mut cols = vec![0u64; n];
        match (&self.model.placement, self.model.flow.geometric_p()) {
            (Placement::UniformDense, Some(p)) => {
                let gamma = Gamma::new(k as f64, p / (1.0 - p)).unwrap();
                for i in 0..n {
                    for j in 0..n {
                        let rate: f64 = gamma.sample(&mut self.rng);
                        let v = if rate > 0.0 {
                            Poisson::new(rate).unwrap().sample(&mut self.rng) as u64
                        } else {
                            0
                        };
                        rows[i] += v;
                        cols[j] += v;
                    }
                }
            }
            _ => {
                let mut agg = TrafficMatrix::zeros(n);
                for _ in 0..k {
                    let x = self.model.sample_demand(&mut self.rng);
                    agg.add_assign(&x).expect("same dimensions");
                }
                return agg.clearance_time();
            }
        }
        rows.into_iter().chain(cols).max().unwrap_or(0)
    }
}

impl<R: Rng> OverflowProbe for FrameOverflowSampler<R> {
    fn overflow_frequency(&mut self, frame_size: u64) -> f64 {
        if self.frames == 0 {
            return 0.0;
        }
        let overflows = (0..self.frames)
            .filter(|_| self.sample_frame_clearance(frame_size) >= frame_size)
            .count();
        overflows as f64 / self.frames as f64
    }
}

/// Multiplicative steps of the empirical tuner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuneStep {
    pub down: f64,
    pub up: f64,
}

impl Default for TuneStep {
    fn default() -> Self {
        TuneStep { down: 0.8, up: 1.25 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TuneStatus {
    /// |delta' - delta| <= delta / 2.
    Converged,
    /// gamma reached the cap with the target still met.
    AtCap,
    /// Rounds exhausted; the result is the best round seen.
    MaxRounds,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneRound {
    pub params: CabParameters,
    pub measured: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneOutcome {
    pub gamma: f64,
    pub params: CabParameters,
    pub measured: f64,
    pub status: TuneStatus,
    pub rounds: Vec<TuneRound>,
}

impl TuneOutcome {
    pub fn warning(&self) -> bool {
        self.status == TuneStatus::MaxRounds
    }
}

/// Adjusts gamma until the measured overflow frequency delta' is within
/// delta / 2 of the target delta solved for that gamma. Overflow above target
/// lowers gamma (longer frames); overflow at or below target raises it.
pub fn empirical_gamma_tune<P: OverflowProbe + ?Sized>(
    probe: &mut P,
    n: usize,
    rho: f64,
    initial_gamma: f64,
    step: TuneStep,
    max_rounds: usize,
) -> Result<TuneOutcome, TuningError> {
    if max_rounds == 0 {
        return Err(TuningError::InvalidInput("max_rounds = 0".into()));
    }
    if !(step.down > 0.0 && step.down < 1.0 && step.up > 1.0) {
        return Err(TuningError::InvalidInput(format!("{step:?}")));
    }
    let mut gamma = initial_gamma.min(GAMMA_SEARCH_CAP);
    let mut rounds: Vec<TuneRound> = Vec::new();
    let finish = |rounds: Vec<TuneRound>, idx: usize, status| {
        let r = &rounds[idx];
        TuneOutcome {
            gamma: r.params.gamma,
            params: r.params,
            measured: r.measured,
            status,
            rounds: rounds.clone(),
        }
    };
    for _ in 0..max_rounds {
        let params = solve_delta_t(gamma, n, rho)?;
        let measured = probe.overflow_frequency(params.frame_size);
        rounds.push(TuneRound { params, measured });
        let last = rounds.len() - 1;
        if (measured - params.delta).abs() <= params.delta / 2.0 {
            return Ok(finish(rounds, last, TuneStatus::Converged));
        }
        if measured > params.delta {
            gamma *= step.down;
        } else if gamma >= GAMMA_SEARCH_CAP {
            return Ok(finish(rounds, last, TuneStatus::AtCap));
        } else {
            gamma = (gamma * step.up).min(GAMMA_SEARCH_CAP);
        }
    }
    warn!("empirical gamma tuning stopped after {max_rounds} rounds");
    // Best so far: the largest gamma that met its target, else the smallest
    // gamma tried.
    let best = rounds
        .iter()
        .enumerate()
        .filter(|(_, r)| r.measured <= r.params.delta)
        .max_by(|a, b| a.1.params.gamma.total_cmp(&b.1.params.gamma))
        .or_else(|| {
            rounds
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.params.gamma.total_cmp(&b.1.params.gamma))
        })
        .map(|(i, _)| i)
        .unwrap();
    Ok(finish(rounds, best, TuneStatus::MaxRounds))
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn solved_parameters_are_self_consistent(
            gamma in 0.001f64..5.0,
            n in 1usize..500,
            rho in 0.01f64..0.99,
        ) {
            let p = solve_delta_t(gamma, n, rho).unwrap();
            prop_assert!(p.frame_size >= 2);
            prop_assert!(p.residual(n, rho).abs() <= 1e-6);
            prop_assert!(p.frame_size >= frame_size_for(gamma, n, p.delta));
        }
    }
}
