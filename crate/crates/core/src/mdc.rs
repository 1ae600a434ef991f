//! Multiple-description scalar quantization by nested lattices and an index
//! assignment.
//!
//! All lattice points are handled in normalized units (`Δ = 1`): the central
//! lattice is `Z`, the side lattice `rZ` and the shift lattice `r²Z`. A central
//! point `b` is mapped to a `k`-tuple of side points by a table over the `r²`
//! points of `V` closest to the origin, extended by `φ(b + r²n) = φ(b) + r²n`.

use std::collections::HashMap;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MdcError {
    #[error("nesting ratio must be an odd positive integer, got {0}")]
    EvenRatio(u32),
    #[error("description count must be at least 2, got {0}")]
    TooFewDescriptions(usize),
    #[error("step size must be positive and finite, got {0}")]
    BadStep(f64),
    #[error("no tabulated expansion factor for k = {0}; supply psi")]
    NoPsi(usize),
    #[error("tuple pool still smaller than r² after {0} doublings of the distance bound")]
    Infeasible(u32),
    #[error("unassigned tuple {0:?}")]
    Unassigned(Vec<i64>),
    #[error("invalid table: {0}")]
    InvalidTable(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LatticeParams {
    pub delta: f64,
    pub r: u32,
    pub k: usize,
}

impl LatticeParams {
    pub fn new(delta: f64, r: u32, k: usize) -> Result<Self, MdcError> {
        if r.is_multiple_of(2) {
            return Err(MdcError::EvenRatio(r));
        }
        if k < 2 {
            return Err(MdcError::TooFewDescriptions(k));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(MdcError::BadStep(delta));
        }
        Ok(LatticeParams { delta, r, k })
    }

    pub fn delta_s(&self) -> f64 {
        self.r as f64 * self.delta
    }

    pub fn period(&self) -> i64 {
        (self.r * self.r) as i64
    }
}

/// The `r²` central points closer to the origin than to any other point of `r²Z`.
pub fn build_v(r: u32) -> Result<Vec<i64>, MdcError> {
    if r.is_multiple_of(2) {
        return Err(MdcError::EvenRatio(r));
    }
    let h = ((r * r - 1) / 2) as i64;
    Ok((-h..=h).collect())
}

/// `S(a1)`: tuples of side points starting with `a1` whose pairwise distances
/// are at most `bound`, in lexicographic order.
pub fn enumerate_tuples(a1: i64, r: u32, k: usize, bound: i64) -> Vec<Vec<i64>> {
    let r = r as i64;
    let lo = (a1 - bound).div_euclid(r) * r;
    let pts: Vec<i64> = (0..)
        .map(|i| lo + i * r)
        .skip_while(|x| *x < a1 - bound)
        .take_while(|x| *x <= a1 + bound)
        .collect();
    let mut out = Vec::new();
    let mut cur = vec![a1];
    fn rec(
        pts: &[i64],
        k: usize,
        bound: i64,
        lo: i64,
        hi: i64,
        cur: &mut Vec<i64>,
        out: &mut Vec<Vec<i64>>,
    ) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for &p in pts {
            let (l, h) = (lo.min(p), hi.max(p));
            if h - l <= bound {
                cur.push(p);
                rec(pts, k, bound, l, h, cur, out);
                cur.pop();
            }
        }
    }
    rec(&pts, k, bound, a1, a1, &mut cur, &mut out);
    out
}

/// Optimal solution of a rectangular assignment problem (rows ≤ columns).
#[derive(Clone, Debug)]
pub struct LapSolution {
    pub cost: i64,
    /// Column assigned to each row.
    pub assignment: Vec<usize>,
    /// Row potentials.
    pub u: Vec<i64>,
    /// Column potentials; zero on unassigned columns.
    pub v: Vec<i64>,
}

/// Shortest augmenting path Hungarian method, `O(n² m)`.
pub fn solve_lap(cost: &[Vec<i64>]) -> LapSolution {
    let n = cost.len();
    let m = cost.first().map_or(0, |r| r.len());
    assert!(n <= m, "more rows than columns");
    const INF: i64 = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![INF; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
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
            }
            for j in 0..=m {
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
    let mut assignment = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    let total = (0..n).map(|i| cost[i][assignment[i]]).sum();
    LapSolution { cost: total, assignment, u: u[1..].to_vec(), v: v[1..].to_vec() }
}

/// Assignment cost in units of `1/k`: `|k b − Σ a|`.
pub fn scaled_cost(b: i64, tuple: &[i64]) -> i64 {
    (tuple.len() as i64 * b - tuple.iter().sum::<i64>()).abs()
}

fn tie_key(t: &[i64]) -> (Vec<i64>, Vec<i64>) {
    let mut abs: Vec<i64> = t.iter().map(|x| x.abs()).collect();
    abs.sort_unstable();
    (abs, t.to_vec())
}

/// Index assignment table over `V` with its exact inverse.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexAssignment {
    pub r: u32,
    pub k: usize,
    /// `(b, φ(b))` for every `b ∈ V`, ascending in `b`.
    pub table: Vec<(i64, Vec<i64>)>,
    /// Distance bound of the tuple pool, when built by the solver.
    pub phi_bound: Option<i64>,
    inverse: HashMap<Vec<i64>, i64>,
}

impl IndexAssignment {
    /// Wraps an explicit table after checking coverage, distinctness and an
    /// unambiguous inverse under the shift rule.
    pub fn from_table(r: u32, k: usize, rows: Vec<(i64, Vec<i64>)>) -> Result<Self, MdcError> {
        let v = build_v(r)?;
        let mut rows = rows;
        rows.sort_by_key(|row| row.0);
        if rows.iter().map(|row| row.0).collect::<Vec<_>>() != v {
            return Err(MdcError::InvalidTable("rows must cover V exactly".into()));
        }
        let ri = r as i64;
        let mut inverse = HashMap::new();
        for (b, t) in &rows {
            if t.len() != k || t.iter().any(|a| a.rem_euclid(ri) != 0) {
                return Err(MdcError::InvalidTable(format!("row {b}: {t:?}")));
            }
            if inverse.insert(t.clone(), *b).is_some() {
                return Err(MdcError::InvalidTable(format!("duplicate tuple {t:?}")));
            }
        }
        let ia = IndexAssignment { r, k, table: rows, phi_bound: None, inverse };
        for (b, t) in &ia.table {
            if ia.invert(t)? != *b {
                return Err(MdcError::InvalidTable(format!("ambiguous inverse for {t:?}")));
            }
        }
        Ok(ia)
    }

    pub fn period(&self) -> i64 {
        (self.r * self.r) as i64
    }

    /// Sum of `|b − mean φ(b)|` over the table, in units of `1/k`.
    pub fn scaled_cost(&self) -> i64 {
        self.table.iter().map(|(b, t)| scaled_cost(*b, t)).sum()
    }

    pub fn cost(&self) -> f64 {
        self.scaled_cost() as f64 / self.k as f64
    }

    /// `φ(b)` for any central point, by the shift rule.
    pub fn map(&self, b: i64) -> Vec<i64> {
        let p = self.period();
        let h = (p - 1) / 2;
        let s = (b + h).div_euclid(p);
        let b0 = b - s * p;
        self.table[(b0 + h) as usize]
            .1
            .iter()
            .map(|a| a + s * p)
            .collect()
    }

    /// `φ⁻¹` of a complete tuple.
    pub fn invert(&self, t: &[i64]) -> Result<i64, MdcError> {
        let p = self.period();
        let mean = t.iter().sum::<i64>() as f64 / t.len() as f64;
        let m = (mean / p as f64 + 0.5).floor() as i64;
        for s in [m, m - 1, m + 1] {
            let key: Vec<i64> = t.iter().map(|a| a - s * p).collect();
            if let Some(b) = self.inverse.get(&key) {
                return Ok(b + s * p);
            }
        }
        Err(MdcError::Unassigned(t.to_vec()))
    }

    /// Central index of `v` (nearest, ties away from zero) and its side tuple.
    pub fn encode(&self, v: f64, delta: f64) -> (i64, Vec<i64>) {
        let b = (v / delta).round() as i64;
        (b, self.map(b))
    }

    /// Reconstruction from the received `(description, side point)` pairs:
    /// exact inverse for all `k`, mean of the received points otherwise, and
    /// `empty` when nothing arrived.
    pub fn decode(&self, received: &[(usize, i64)], delta: f64, empty: f64) -> Result<f64, MdcError> {
        match received.len() {
            0 => Ok(empty),
            n if n == self.k => {
                let mut t = vec![0; self.k];
                for (j, a) in received {
                    t[*j] = *a;
                }
                Ok(self.invert(&t)? as f64 * delta)
            }
            n => Ok(received.iter().map(|p| p.1 as f64).sum::<f64>() / n as f64 * delta),
        }
    }
}

/// Minimum-cost assignment of `V` to tuples from `∪ S(a1)`, `a1 ∈ V ∩ rZ`.
///
/// The distance bound starts at `r⌈(r−1)/2⌉` and doubles while the pool has
/// fewer than `r²` tuples. Among optimal assignments, central points are
/// fixed in order of increasing `|b|` (negative first), each to the smallest
/// tuple by sorted absolute values and then signed values that still admits
/// an optimal completion.
pub fn solve_assignment(r: u32, k: usize) -> Result<IndexAssignment, MdcError> {
    if k < 2 {
        return Err(MdcError::TooFewDescriptions(k));
    }
    let v = build_v(r)?;
    let ri = r as i64;
    let mut bound = ri * ((ri - 1) / 2);
    let mut growth = 0;
    let pool = loop {
        let pool: Vec<Vec<i64>> = v
            .iter()
            .filter(|a| *a % ri == 0)
            .flat_map(|a1| enumerate_tuples(*a1, r, k, bound))
            .collect();
        if pool.len() >= v.len() {
            break pool;
        }
        growth += 1;
        if growth > 8 {
            return Err(MdcError::Infeasible(8));
        }
        bound = if bound == 0 { ri } else { 2 * bound };
    };
    let cost: Vec<Vec<i64>> = v
        .iter()
        .map(|b| pool.iter().map(|t| scaled_cost(*b, t)).collect())
        .collect();

    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by_key(|i| (v[*i].abs(), v[*i]));
    let mut by_key: Vec<usize> = (0..pool.len()).collect();
    by_key.sort_by_key(|j| tie_key(&pool[*j]));

    let mut rows_left: Vec<usize> = (0..v.len()).collect();
    let mut cols_left: Vec<usize> = (0..pool.len()).collect();
    let residual = |rows: &[usize], cols: &[usize]| {
        let sub: Vec<Vec<i64>> = rows
            .iter()
            .map(|i| cols.iter().map(|j| cost[*i][*j]).collect())
            .collect();
        solve_lap(&sub)
    };
    let mut current = residual(&rows_left, &cols_left);
    let mut chosen = vec![usize::MAX; v.len()];
    for &bi in &order {
        let ri_pos = rows_left.iter().position(|x| *x == bi).unwrap();
        let col_pos: HashMap<usize, usize> =
            cols_left.iter().enumerate().map(|(p, j)| (*j, p)).collect();
        let rows_next: Vec<usize> = rows_left.iter().copied().filter(|x| *x != bi).collect();
        let mut fixed = None;
        for &tj in &by_key {
            let Some(&cp) = col_pos.get(&tj) else { continue };
            // Only tight edges can lie in an optimal assignment.
            if cost[bi][tj] - current.u[ri_pos] - current.v[cp] != 0 {
                continue;
            }
            let cols_next: Vec<usize> = cols_left.iter().copied().filter(|x| *x != tj).collect();
            let sol = residual(&rows_next, &cols_next);
            if sol.cost + cost[bi][tj] == current.cost {
                fixed = Some((tj, cols_next, sol));
                break;
            }
        }
        let (tj, cols_next, sol) = fixed.expect("an optimal completion always exists");
        chosen[bi] = tj;
        rows_left = rows_next;
        cols_left = cols_next;
        current = if rows_left.is_empty() {
            LapSolution { cost: 0, assignment: vec![], u: vec![], v: vec![0; cols_left.len()] }
        } else {
            sol
        };
    }
    let rows = v
        .iter()
        .zip(&chosen)
        .map(|(b, j)| (*b, pool[*j].clone()))
        .collect();
    let mut ia = IndexAssignment::from_table(r, k, rows)?;
    ia.phi_bound = Some(bound);
    Ok(ia)
}

/// Published assignment tables for `(r, k)` in `{(3, 2), (3, 3), (7, 3)}`.
pub fn published(r: u32, k: usize) -> Option<IndexAssignment> {
    let rows: Vec<(i64, Vec<i64>)> = match (r, k) {
        (3, 2) => [
            (-4, [-6, -3]),
            (-3, [-3, -3]),
            (-2, [-3, 0]),
            (-1, [0, -3]),
            (0, [0, 0]),
            (1, [3, 0]),
            (2, [0, 3]),
            (3, [3, 3]),
            (4, [6, 3]),
        ]
        .iter()
        .map(|(b, t)| (*b, t.to_vec()))
        .collect(),
        (3, 3) => [
            (-4, [-3, -3, -6]),
            (-3, [-3, -3, -3]),
            (-2, [0, -3, -3]),
            (-1, [0, 0, -3]),
            (0, [0, 0, 0]),
            (1, [0, 0, 3]),
            (2, [0, 3, 3]),
            (3, [3, 3, 3]),
            (4, [3, 3, 6]),
        ]
        .iter()
        .map(|(b, t)| (*b, t.to_vec()))
        .collect(),
        (7, 3) => PUBLISHED_7_3.iter().map(|(b, t)| (*b, t.to_vec())).collect(),
        _ => return None,
    };
    Some(IndexAssignment::from_table(r, k, rows).expect("published tables are valid"))
}

const PUBLISHED_7_3: [(i64, [i64; 3]); 49] = [
    (-24, [-21, -21, -28]),
    (-23, [-21, -14, -28]),
    (-22, [-14, -21, -28]),
    (-21, [-21, -21, -21]),
    (-20, [-21, -21, -14]),
    (-19, [-21, -14, -21]),
    (-18, [-14, -21, -21]),
    (-17, [-14, -14, -21]),
    (-16, [-21, -14, -14]),
    (-15, [-14, -21, -14]),
    (-14, [-14, -14, -14]),
    (-13, [-14, -14, -7]),
    (-12, [-14, -7, -14]),
    (-11, [-7, -14, -14]),
    (-10, [-7, -7, -14]),
    (-9, [-14, -7, -7]),
    (-8, [-7, -14, -7]),
    (-7, [-7, -7, -7]),
    (-6, [-7, -7, 0]),
    (-5, [-7, 0, -7]),
    (-4, [0, -7, -7]),
    (-3, [0, 0, -7]),
    (-2, [-7, 0, 0]),
    (-1, [0, -7, 0]),
    (0, [0, 0, 0]),
    (1, [0, 0, 7]),
    (2, [7, 0, 0]),
    (3, [0, 7, 0]),
    (4, [0, 7, 7]),
    (5, [7, 7, 0]),
    (6, [7, 0, 7]),
    (7, [7, 7, 7]),
    (8, [14, 7, 7]),
    (9, [7, 14, 7]),
    (10, [7, 7, 14]),
    (11, [7, 14, 14]),
    (12, [14, 14, 7]),
    (13, [14, 7, 14]),
    (14, [14, 14, 14]),
    (15, [14, 14, 21]),
    (16, [21, 14, 14]),
    (17, [14, 21, 14]),
    (18, [14, 21, 21]),
    (19, [21, 21, 14]),
    (20, [21, 14, 21]),
    (21, [21, 14, 28]),
    (22, [14, 21, 28]),
    (23, [21, 21, 21]),
    (24, [21, 21, 28]),
];

/// Expansion factor `ψ(k)` where tabulated.
pub fn psi(k: usize) -> Option<f64> {
    match k {
        2 => Some(1.0),
        3 => Some(1.1547),
        _ => None,
    }
}

/// Noise variance after combining `ℓ` descriptions, for `ℓ = 0..=k`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SideDistortionProfile {
    /// `sigma2[0]` is the total-loss variance, `sigma2[k] = Δ²/12`.
    pub sigma2: Vec<f64>,
    pub psi: f64,
}

impl SideDistortionProfile {
    pub fn k(&self) -> usize {
        self.sigma2.len() - 1
    }

    /// Same profile with another total-loss variance.
    pub fn with_total_loss(&self, s0: f64) -> Self {
        let mut p = self.clone();
        p.sigma2[0] = s0;
        p
    }
}

/// `σ²(ℓ) ≈ Δ²/12 + (k−ℓ)/(2kℓ) · Δ²/12 · r^{2k/(k−1)} · ψ(k)²`, with
/// `σ²(0) = σ_v²` (reconstruction at the mean).
pub fn sigma2_profile(
    params: &LatticeParams,
    sigma_v2: f64,
    psi_k: Option<f64>,
) -> Result<SideDistortionProfile, MdcError> {
    let k = params.k;
    let psi_k = psi_k.or_else(|| psi(k)).ok_or(MdcError::NoPsi(k))?;
    let base = params.delta * params.delta / 12.0;
    let expansion = (params.r as f64).powf(2.0 * k as f64 / (k as f64 - 1.0)) * psi_k * psi_k;
    let mut sigma2 = vec![sigma_v2];
    for l in 1..=k {
        let (kf, lf) = (k as f64, l as f64);
        sigma2.push(base + (kf - lf) / (2.0 * kf * lf) * base * expansion);
    }
    Ok(SideDistortionProfile { sigma2, psi: psi_k })
}

/// High-resolution sum-rate estimate for a Gaussian quantizer input.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SumRate {
    pub bits: f64,
    /// False when `Δ_s² ≥ 2πe σ_v²`, where the estimate is meaningless.
    pub valid: bool,
}

/// `R_s ≈ (k/2) log₂(2πe σ_v²) − k log₂ Δ_s`.
pub fn sumrate_approx(k: usize, sigma_v2: f64, delta_s: f64) -> SumRate {
    let two_pi_e = 2.0 * std::f64::consts::PI * std::f64::consts::E;
    let kf = k as f64;
    SumRate {
        bits: 0.5 * kf * (two_pi_e * sigma_v2).log2() - kf * delta_s.log2(),
        valid: delta_s * delta_s < two_pi_e * sigma_v2,
    }
}

/// Sum-rate lower bound for `k` descriptions of a unit-variance Gaussian
/// source with pairwise noise correlation `rho` and noise variance `sigma2`
/// (relative to the source), when only `k′` or `k` descriptions matter.
pub fn correlated_sumrate_lb(k: usize, k_prime: usize, rho: f64, sigma2: f64) -> f64 {
    let (kf, kp) = (k as f64, k_prime as f64);
    let first = (kp + sigma2 * (1.0 + (kp - 1.0) * rho)) / (sigma2 * (1.0 - rho));
    let second = (1.0 - rho) / (1.0 + (kf - 1.0) * rho);
    kf / (2.0 * kp) * first.log2() + 0.5 * second.log2()
}
