//! Crossbar schedules and the matching machinery behind them: maximum-weight
//! matching, Birkhoff-von Neumann decomposition and minimum-time clearance.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::traffic::{clearance_time, TrafficMatrix};

#[derive(Debug, Error, PartialEq)]
pub enum MatchingError {
    #[error("rate matrix must be square and nonempty")]
    NotSquare,
    #[error("rate matrix has a negative or non-finite entry at ({0}, {1})")]
    BadEntry(usize, usize),
    #[error("{kind} {index} sums to {sum}, exceeding 1")]
    NotSubStochastic {
        kind: &'static str,
        index: usize,
        sum: f64,
    },
    #[error("no perfect matching on residual support (max residual {0:e})")]
    Stalled(f64),
}

/// One slot's crossbar configuration: `assign[i]` is the output input `i`
/// is connected to, or `None` when the input idles.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Matching {
    assign: Vec<Option<usize>>,
}

impl Matching {
    pub fn idle(n: usize) -> Self {
        Matching {
            assign: vec![None; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        Matching {
            assign: (0..n).map(Some).collect(),
        }
    }

    pub fn from_assign(assign: Vec<Option<usize>>) -> Self {
        Matching { assign }
    }

    /// `perm[i]` is the output of input `i`.
    pub fn from_permutation(perm: &[usize]) -> Self {
        Matching {
            assign: perm.iter().copied().map(Some).collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.assign.len()
    }

    pub fn output_of(&self, input: usize) -> Option<usize> {
        self.assign[input]
    }

    pub fn assign(&self) -> &[Option<usize>] {
        &self.assign
    }

    /// Activated `(input, output)` pairs in input order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.assign
            .iter()
            .enumerate()
            .filter_map(|(i, o)| o.map(|j| (i, j)))
    }

    pub fn is_idle(&self) -> bool {
        self.assign.iter().all(Option::is_none)
    }

    pub fn is_feasible(&self) -> bool {
        is_feasible(self)
    }

    pub fn weight(&self, weights: &[Vec<f64>]) -> f64 {
        self.pairs().map(|(i, j)| weights[i][j]).sum()
    }

    /// Drops the pairs for which `keep` is false.
    pub fn restricted<F: Fn(usize, usize) -> bool>(&self, keep: F) -> Matching {
        Matching {
            assign: self
                .assign
                .iter()
                .enumerate()
                .map(|(i, o)| o.filter(|&j| keep(i, j)))
                .collect(),
        }
    }
}

/// Crossbar constraint: every output is used at most once and lies in range.
pub fn is_feasible(m: &Matching) -> bool {
    let n = m.n();
    let mut used = vec![false; n];
    for j in m.assign.iter().flatten() {
        if *j >= n || used[*j] {
            return false;
        }
        used[*j] = true;
    }
    true
}

/// Bipartite matching on a changing support, repaired incrementally with
/// augmenting paths. `adj[i]` lists the columns adjacent to row `i`; rows
/// and adjacency lists are scanned in order, so results are deterministic.
#[derive(Debug, Clone)]
struct SupportMatcher {
    n: usize,
    row_mate: Vec<Option<usize>>,
    col_mate: Vec<Option<usize>>,
    visited: Vec<bool>,
}

impl SupportMatcher {
    fn new(n: usize) -> Self {
        SupportMatcher {
            n,
            row_mate: vec![None; n],
            col_mate: vec![None; n],
            visited: vec![false; n],
        }
    }

    fn unmatch_row(&mut self, i: usize) {
        if let Some(j) = self.row_mate[i].take() {
            self.col_mate[j] = None;
        }
    }

    /// Grows the matching to a maximum one; true when it is perfect.
    ///
    /// Each pass shares one visited set across all free rows. A pass that
    /// augments nothing leaves the matching unchanged, so every column it
    /// visited is a dead end and the matching is maximum.
    fn repair(&mut self, adj: &[Vec<usize>]) -> bool {
        loop {
            let free: Vec<usize> = (0..self.n).filter(|&i| self.row_mate[i].is_none()).collect();
            if free.is_empty() {
                return true;
            }
            self.visited.iter_mut().for_each(|v| *v = false);
            let mut progress = false;
            for r in free {
                progress |= self.augment(r, adj);
            }
            if !progress {
                return false;
            }
        }
    }

    fn augment(&mut self, row: usize, adj: &[Vec<usize>]) -> bool {
        for &j in &adj[row] {
            if !self.visited[j] && self.col_mate[j].is_none() {
                self.visited[j] = true;
                self.row_mate[row] = Some(j);
                self.col_mate[j] = Some(row);
                return true;
            }
        }
        for &j in &adj[row] {
            if self.visited[j] {
                continue;
            }
            self.visited[j] = true;
            let Some(r) = self.col_mate[j] else { continue };
            if self.augment(r, adj) {
                self.row_mate[row] = Some(j);
                self.col_mate[j] = Some(row);
                return true;
            }
        }
        false
    }

    fn permutation(&self) -> Vec<usize> {
        self.row_mate.iter().map(|m| m.expect("perfect matching")).collect()
    }
}

/// Rewrites a perfect matching of the graph `edge` into the lexicographically
/// smallest perfect matching (smallest output for input 0, then input 1, ...).
fn lex_min_perfect<E: Fn(usize, usize) -> bool>(mut perm: Vec<usize>, edge: &E) -> Vec<usize> {
    let n = perm.len();
    let mut owner = vec![0usize; n];
    for (i, &j) in perm.iter().enumerate() {
        owner[j] = i;
    }
    for i in 0..n {
        let current = perm[i];
        for j in 0..current {
            if !edge(i, j) || owner[j] < i {
                continue;
            }
            // Move i onto j; the displaced row must reach `current` through an
            // alternating path over unfixed rows.
            let displaced = owner[j];
            let mut blocked = vec![false; n];
            for r in 0..i {
                blocked[perm[r]] = true;
            }
            blocked[j] = true;
            let mut trail = Vec::new();
            if alternating_path(displaced, current, edge, &perm, &owner, &mut blocked, &mut trail) {
                // trail holds (row, new column) steps.
                for &(r, c) in &trail {
                    perm[r] = c;
                    owner[c] = r;
                }
                perm[i] = j;
                owner[j] = i;
                break;
            }
        }
    }
    perm
}

fn alternating_path<E: Fn(usize, usize) -> bool>(
    row: usize,
    target: usize,
    edge: &E,
    perm: &[usize],
    owner: &[usize],
    blocked: &mut [bool],
    trail: &mut Vec<(usize, usize)>,
) -> bool {
    let n = perm.len();
    for c in 0..n {
        if blocked[c] || c == perm[row] || !edge(row, c) {
            continue;
        }
        if c == target {
            trail.push((row, c));
            return true;
        }
        blocked[c] = true;
        let next = owner[c];
        if alternating_path(next, target, edge, perm, owner, blocked, trail) {
            trail.push((row, c));
            return true;
        }
    }
    false
}

/// Maximum-weight perfect matching (assignment) of a square weight matrix.
/// Among optimal assignments the lexicographically smallest is returned.
pub fn max_weight_matching(weights: &[Vec<f64>]) -> Matching {
    let n = weights.len();
    if n == 0 {
        return Matching::idle(0);
    }
    // Minimize cost = -weight with the O(n^3) potentials method (1-indexed).
    let inf = f64::INFINITY;
    let cost = |i: usize, j: usize| -weights[i - 1][j - 1];
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0usize; n];
    for j in 1..=n {
        perm[p[j] - 1] = j - 1;
    }
    // Every optimal assignment uses only edges that are tight for the final
    // potentials, so the tie-break is a search within the tight subgraph.
    let scale = weights
        .iter()
        .flatten()
        .fold(1.0f64, |m, w| m.max(w.abs()));
    let tol = 1e-9 * scale;
    let tight = |i: usize, j: usize| cost(i + 1, j + 1) - u[i + 1] - v[j + 1] <= tol;
    Matching::from_permutation(&lex_min_perfect(perm, &tight))
}

/// Convex combination of permutations dominating a sub-stochastic rate matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BvnDecomposition {
    pub matchings: Vec<Matching>,
    pub probabilities: Vec<f64>,
}

impl BvnDecomposition {
    pub fn total_probability(&self) -> f64 {
        self.probabilities.iter().sum()
    }

    /// sum_k p_k M_k as a dense matrix.
    pub fn covered(&self, n: usize) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; n]; n];
        for (m, &p) in self.matchings.iter().zip(&self.probabilities) {
            for (i, j) in m.pairs() {
                out[i][j] += p;
            }
        }
        out
    }
}

const BVN_TOL: f64 = 1e-12;

/// Pads `rate` to a doubly stochastic matrix and peels off permutations,
/// each weighted by the smallest residual entry it covers.
pub fn bvn_decompose(rate: &[Vec<f64>]) -> Result<BvnDecomposition, MatchingError> {
    let n = rate.len();
    if n == 0 || rate.iter().any(|r| r.len() != n) {
        return Err(MatchingError::NotSquare);
    }
    for (i, row) in rate.iter().enumerate() {
        for (j, &x) in row.iter().enumerate() {
            if !(x >= 0.0 && x.is_finite()) {
                return Err(MatchingError::BadEntry(i, j));
            }
        }
    }
    let row_sums: Vec<f64> = rate.iter().map(|r| r.iter().sum()).collect();
    let col_sums: Vec<f64> = (0..n).map(|j| rate.iter().map(|r| r[j]).sum()).collect();
    for (kind, sums) in [("row", &row_sums), ("column", &col_sums)] {
        if let Some((index, &sum)) = sums.iter().enumerate().find(|(_, &s)| s > 1.0 + BVN_TOL) {
            return Err(MatchingError::NotSubStochastic { kind, index, sum });
        }
    }

    let mut residual: Vec<Vec<f64>> = rate.to_vec();
    let mut row_def: Vec<f64> = row_sums.iter().map(|s| (1.0 - s).max(0.0)).collect();
    let mut col_def: Vec<f64> = col_sums.iter().map(|s| (1.0 - s).max(0.0)).collect();
    for i in 0..n {
        for j in 0..n {
            let add = row_def[i].min(col_def[j]);
            if add > 0.0 {
                residual[i][j] += add;
                row_def[i] -= add;
                col_def[j] -= add;
            }
        }
    }

    let mut out = BvnDecomposition {
        matchings: Vec::new(),
        probabilities: Vec::new(),
    };
    let mut matcher = SupportMatcher::new(n);
    let mut adj: Vec<Vec<usize>> = residual
        .iter()
        .map(|r| (0..n).filter(|&j| r[j] > BVN_TOL).collect())
        .collect();
    loop {
        let max_residual = residual.iter().flatten().fold(0.0f64, |m, &x| m.max(x));
        if max_residual < BVN_TOL {
            break;
        }
        if !matcher.repair(&adj) {
            let mass: f64 = residual.iter().flatten().sum();
            if mass < 1e-10 {
                break;
            }
            return Err(MatchingError::Stalled(max_residual));
        }
        let perm = matcher.permutation();
        let p = perm
            .iter()
            .enumerate()
            .map(|(i, &j)| residual[i][j])
            .fold(f64::INFINITY, f64::min);
        for (i, &j) in perm.iter().enumerate() {
            residual[i][j] -= p;
            if residual[i][j] <= BVN_TOL {
                residual[i][j] = 0.0;
                adj[i].retain(|&c| c != j);
                matcher.unmatch_row(i);
            }
        }
        out.matchings.push(Matching::from_permutation(&perm));
        out.probabilities.push(p);
    }
    Ok(out)
}

/// A sequence of matchings that transmits every packet of `covers`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClearanceSchedule {
    pub matchings: Vec<Matching>,
    pub covers: TrafficMatrix,
}

impl ClearanceSchedule {
    pub fn len(&self) -> usize {
        self.matchings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matchings.is_empty()
    }

    /// Replays the schedule on a copy of `covers`; returns what is left.
    pub fn replay(&self) -> TrafficMatrix {
        let mut left = self.covers.clone();
        for m in &self.matchings {
            for (i, j) in m.pairs() {
                left.decrement(i, j);
            }
        }
        left
    }
}

/// Clears `x` in exactly `clearance_time(x)` slots.
///
/// `x` is padded with dummy packets until every row and column sums to
/// tau(x), filling deficient (row, column) pairs in row-major order. A
/// regular bipartite multigraph always has a perfect matching, so tau
/// successive extractions empty the padded matrix. Pairs whose packet is a
/// dummy are left idle in the returned matchings.
pub fn clearance_schedule(x: &TrafficMatrix) -> ClearanceSchedule {
    let n = x.n();
    let tau = clearance_time(x);
    let mut padded = x.clone();
    let mut row_def: Vec<u64> = x.row_sums().iter().map(|s| tau - s).collect();
    let mut col_def: Vec<u64> = x.col_sums().iter().map(|s| tau - s).collect();
    for i in 0..n {
        if row_def[i] == 0 {
            continue;
        }
        for j in 0..n {
            let add = row_def[i].min(col_def[j]);
            if add > 0 {
                padded.add(i, j, add as u32);
                row_def[i] -= add;
                col_def[j] -= add;
            }
        }
    }
    debug_assert!(row_def.iter().chain(&col_def).all(|&d| d == 0));

    let mut real = x.clone();
    let mut matchings = Vec::with_capacity(tau as usize);
    let mut matcher = SupportMatcher::new(n);
    let mut adj: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| padded.get(i, j) > 0).collect())
        .collect();
    for _ in 0..tau {
        let found = matcher.repair(&adj);
        assert!(found, "regular padded matrix must have a perfect matching");
        let mut assign = vec![None; n];
        for (i, slot) in assign.iter_mut().enumerate() {
            let j = matcher.row_mate[i].unwrap();
            padded.decrement(i, j);
            if real.decrement(i, j) {
                *slot = Some(j);
            }
            if padded.get(i, j) == 0 {
                adj[i].retain(|&c| c != j);
                matcher.unmatch_row(i);
            }
        }
        matchings.push(Matching::from_assign(assign));
    }
    ClearanceSchedule {
        matchings,
        covers: x.clone(),
    }
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn weights() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (1usize..=6).prop_flat_map(|n| {
            proptest::collection::vec(proptest::collection::vec(0u32..50, n), n)
                .prop_map(|w| w.into_iter().map(|r| r.into_iter().map(f64::from).collect()).collect())
        })
    }

    fn traffic() -> impl Strategy<Value = TrafficMatrix> {
        (1usize..=8).prop_flat_map(|n| {
            proptest::collection::vec(proptest::collection::vec(0u32..6, n), n)
                .prop_map(|rows| TrafficMatrix::from_rows(&rows).unwrap())
        })
    }

    proptest! {
        #[test]
        fn mwm_is_optimal_feasible_permutation(w in weights()) {
            let m = max_weight_matching(&w);
            prop_assert!(is_feasible(&m));
            prop_assert!(m.assign().iter().all(Option::is_some));
            let (best, _) = tests::brute_force_mwm(&w);
            prop_assert_eq!(m.weight(&w), best);
        }

        #[test]
        fn clearance_schedule_length_is_tau(x in traffic()) {
            let s = clearance_schedule(&x);
            prop_assert_eq!(s.len() as u64, clearance_time(&x));
            prop_assert!(s.replay().is_zero());
        }
    }
}
