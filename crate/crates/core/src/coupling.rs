//! Cost matrices over (data, noise) batches and the exact assignment solver
//! used to re-pair a minibatch before interpolation.
//!
//! For empirical measures of equal size every extreme coupling is a
//! permutation, so the optimal-transport problem reduces to a linear
//! assignment. Two costs are supported: negative cosine similarity (so
//! minimizing cost maximizes directional agreement) and squared Euclidean
//! distance as a baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interpolant::StatePoint;

/// Norms below this threshold are treated as degenerate; their cosine
/// similarity against anything is defined as 0.
pub const ZERO_NORM_EPS: f64 = 1e-12;

/// Relative tolerance used to decide whether an edge is tight against the
/// dual solution (candidate for an optimal assignment).
const TIGHT_EPS: f64 = 1e-9;

/// Which pairwise cost fills the matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    NegCosine,
    SqEuclidean,
}

/// Dense square cost matrix over a (data, noise) batch pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostMatrix {
    pub entries: Vec<Vec<f64>>,
    pub cost_kind: CostKind,
}

impl CostMatrix {
    pub fn n(&self) -> usize {
        self.entries.len()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.entries[i][j]
    }
}

/// A permutation pairing data index `i` with noise index `perm[i]`, plus the
/// cost it realizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentPlan {
    pub perm: Vec<usize>,
    pub total_cost: f64,
    /// `-total_cost` when the cost is negative cosine; `None` otherwise.
    pub total_similarity: Option<f64>,
}

impl AssignmentPlan {
    fn new(perm: Vec<usize>, cost: &CostMatrix) -> Self {
        let total_cost: f64 = perm.iter().enumerate().map(|(i, &j)| cost.at(i, j)).sum();
        let total_similarity = match cost.cost_kind {
            CostKind::NegCosine => Some(-total_cost),
            CostKind::SqEuclidean => None,
        };
        Self { perm, total_cost, total_similarity }
    }
}

/// Cosine similarity of two vectors; 0 if either norm is below
/// [`ZERO_NORM_EPS`].
pub fn cosine_similarity(x: &StatePoint, y: &StatePoint) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::Shape(format!(
            "cosine_similarity: dimensions {} vs {}",
            x.dim(),
            y.dim()
        )));
    }
    let nx = x.norm();
    let ny = y.norm();
    if nx < ZERO_NORM_EPS || ny < ZERO_NORM_EPS {
        return Ok(0.0);
    }
    Ok((x.dot(y) / (nx * ny)).clamp(-1.0, 1.0))
}

fn sq_euclidean(x: &StatePoint, y: &StatePoint) -> f64 {
    x.coords
        .iter()
        .zip(&y.coords)
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

/// Build the n-by-n cost matrix between a data batch and a noise batch.
pub fn build_cost_matrix(
    data: &[StatePoint],
    noise: &[StatePoint],
    kind: CostKind,
) -> Result<CostMatrix> {
    if data.is_empty() || noise.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    if data.len() != noise.len() {
        return Err(Error::Shape(format!(
            "batch sizes {} vs {}",
            data.len(),
            noise.len()
        )));
    }
    let mut entries = Vec::with_capacity(data.len());
    for d in data {
        let mut row = Vec::with_capacity(noise.len());
        for n in noise {
            let c = match kind {
                CostKind::NegCosine => -cosine_similarity(d, n)?,
                CostKind::SqEuclidean => {
                    if d.dim() != n.dim() {
                        return Err(Error::Shape("dimension mismatch in batch".into()));
                    }
                    sq_euclidean(d, n)
                }
            };
            row.push(c);
        }
        entries.push(row);
    }
    Ok(CostMatrix { entries, cost_kind: kind })
}

/// Shortest-augmenting-path assignment solver, O(n^3). Returns the matched
/// column per row plus the dual potentials (u, v) with
/// `cost[i][j] - u[i] - v[j] >= 0` up to rounding.
fn hungarian(cost: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = cost.len();
    // 1-indexed internally; column 0 is the virtual root.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1]; // row matched to each column
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        row_to_col[matched_row[j] - 1] = j - 1;
    }
    let u_out: Vec<f64> = u[1..].to_vec();
    let v_out: Vec<f64> = v[1..].to_vec();
    (row_to_col, u_out, v_out)
}

/// Kuhn augmenting-path matching restricted to `allowed` edges, with rows
/// and columns masked out. Returns true if every unmasked row can be
/// matched.
fn has_perfect_matching(
    allowed: &[Vec<bool>],
    row_done: &[bool],
    col_done: &[bool],
) -> bool {
    let n = allowed.len();
    let mut col_match: Vec<Option<usize>> = vec![None; n];

    fn try_augment(
        r: usize,
        allowed: &[Vec<bool>],
        col_done: &[bool],
        seen: &mut [bool],
        col_match: &mut [Option<usize>],
    ) -> bool {
        for c in 0..allowed.len() {
            if col_done[c] || seen[c] || !allowed[r][c] {
                continue;
            }
            seen[c] = true;
            if col_match[c].is_none()
                || try_augment(col_match[c].unwrap(), allowed, col_done, seen, col_match)
            {
                col_match[c] = Some(r);
                return true;
            }
        }
        false
    }

    for r in 0..n {
        if row_done[r] {
            continue;
        }
        let mut seen = vec![false; n];
        if !try_augment(r, allowed, col_done, &mut seen, &mut col_match) {
            return false;
        }
    }
    true
}

/// Exact minimum-cost assignment. Ties are broken toward the
/// lexicographically smallest permutation.
///
/// Every optimal permutation uses only edges that are tight against the dual
/// solution, so after the O(n^3) solve the lexicographically smallest
/// optimum is extracted greedily over the tight-edge graph.
pub fn solve_assignment(cost: &CostMatrix) -> AssignmentPlan {
    let n = cost.n();
    let (initial, u, v) = hungarian(&cost.entries);

    let scale = cost
        .entries
        .iter()
        .flatten()
        .fold(1.0f64, |m, &c| m.max(c.abs()));
    let tol = TIGHT_EPS * scale;

    let mut tight = vec![vec![false; n]; n];
    for i in 0..n {
        for j in 0..n {
            if cost.at(i, j) - u[i] - v[j] <= tol {
                tight[i][j] = true;
            }
        }
    }
    // The solver's own matching must survive rounding.
    for (i, &j) in initial.iter().enumerate() {
        tight[i][j] = true;
    }

    let mut perm = vec![usize::MAX; n];
    let mut row_done = vec![false; n];
    let mut col_done = vec![false; n];
    for i in 0..n {
        row_done[i] = true;
        let mut chosen = None;
        for j in 0..n {
            if col_done[j] || !tight[i][j] {
                continue;
            }
            col_done[j] = true;
            if has_perfect_matching(&tight, &row_done, &col_done) {
                chosen = Some(j);
                break;
            }
            col_done[j] = false;
        }
        // A completion always exists: the tight graph contains the solver's
        // own matching, and each fixed column preserved feasibility.
        let j = chosen.expect("tight graph admits a completion");
        col_done[j] = true;
        perm[i] = j;
    }

    AssignmentPlan::new(perm, cost)
}

/// Exhaustive minimum over all n! permutations; refuses n > 8. Ties keep the
/// lexicographically smallest permutation. Test oracle for
/// [`solve_assignment`].
pub fn brute_force_assignment(cost: &CostMatrix) -> Result<AssignmentPlan> {
    let n = cost.n();
    if n > 8 {
        return Err(Error::Domain(format!(
            "brute force refused for n = {n} > 8"
        )));
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    for_each_permutation_lex(n, |perm| {
        let c: f64 = perm.iter().enumerate().map(|(i, &j)| cost.at(i, j)).sum();
        match &best {
            Some((_, bc)) if c >= *bc => {}
            _ => best = Some((perm.to_vec(), c)),
        }
    });
    let (perm, _) = best.expect("n >= 1");
    Ok(AssignmentPlan::new(perm, cost))
}

/// Visit all permutations of {0..n-1} in lexicographic order.
fn for_each_permutation_lex<F: FnMut(&[usize])>(n: usize, mut f: F) {
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        f(&perm);
        // next_permutation
        let Some(i) = (0..n.saturating_sub(1)).rev().find(|&i| perm[i] < perm[i + 1]) else {
            return;
        };
        let j = (i + 1..n).rev().find(|&j| perm[j] > perm[i]).unwrap();
        perm.swap(i, j);
        perm[i + 1..].reverse();
    }
}

/// Result of exhaustively checking the negative-cosine cost duality on one
/// batch pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DualityReport {
    pub n: usize,
    pub permutations_checked: usize,
    /// Largest |C(perm) + J(perm)| observed over all permutations.
    pub max_identity_gap: f64,
    /// Cost-minimizing permutations.
    pub argmin_cost: Vec<Vec<usize>>,
    /// Similarity-maximizing permutations.
    pub argmax_similarity: Vec<Vec<usize>>,
    pub sets_equal: bool,
}

/// Enumerate every permutation of a small batch pair and confirm that total
/// cost is the exact negation of total similarity, and that the minimizer
/// set of the former equals the maximizer set of the latter.
pub fn verify_duality(data: &[StatePoint], noise: &[StatePoint]) -> Result<DualityReport> {
    let n = data.len();
    if n > 8 {
        return Err(Error::Domain(format!("duality check refused for n = {n} > 8")));
    }
    let cost = build_cost_matrix(data, noise, CostKind::NegCosine)?;
    // Similarity matrix built independently from the raw vectors.
    let mut sim = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            sim[i][j] = cosine_similarity(&data[i], &noise[j])?;
        }
    }

    let mut max_gap = 0.0f64;
    let mut min_cost = f64::INFINITY;
    let mut max_sim = f64::NEG_INFINITY;
    let mut argmin: Vec<Vec<usize>> = Vec::new();
    let mut argmax: Vec<Vec<usize>> = Vec::new();
    let mut count = 0usize;

    for_each_permutation_lex(n, |perm| {
        count += 1;
        let c: f64 = perm.iter().enumerate().map(|(i, &j)| cost.entries[i][j]).sum();
        let j_val: f64 = perm.iter().enumerate().map(|(i, &j)| sim[i][j]).sum();
        max_gap = max_gap.max((c + j_val).abs());
        if c < min_cost {
            min_cost = c;
            argmin = vec![perm.to_vec()];
        } else if c == min_cost {
            argmin.push(perm.to_vec());
        }
        if j_val > max_sim {
            max_sim = j_val;
            argmax = vec![perm.to_vec()];
        } else if j_val == max_sim {
            argmax.push(perm.to_vec());
        }
    });

    let sets_equal = argmin == argmax;
    Ok(DualityReport {
        n,
        permutations_checked: count,
        max_identity_gap: max_gap,
        argmin_cost: argmin,
        argmax_similarity: argmax,
        sets_equal,
    })
}
