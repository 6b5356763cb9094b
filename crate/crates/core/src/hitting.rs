//! Dyadic cells, target sets, covers, and Monte Carlo estimators for
//! small-ball and hitting probabilities of `U = (u_1, …, u_d)`, whose
//! components solve the nonlinear equation with independent noises.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coupling::Rectangle;
use crate::error::{Error, Result};
use crate::noise::{derive_seed, GridSpec, Interval};
use crate::solver::{CoupledRun, Ladder, LadderSpec, SigmaSpec};
use crate::stats::{wilson, Z95};

/// `R^n_{m,l}`: time side `2^{-4n}`, space side `2^{-2n}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DyadicCell {
    pub n: u32,
    pub m: i64,
    pub l: i64,
}

impl DyadicCell {
    pub const H1: f64 = 0.25;
    pub const H2: f64 = 0.5;

    pub fn time_side(n: u32) -> f64 {
        2f64.powi(-4 * n as i32)
    }

    pub fn space_side(n: u32) -> f64 {
        2f64.powi(-2 * n as i32)
    }
}

fn overlaps(lo: f64, hi: f64, w: Interval) -> bool {
    hi > w.lo && lo < w.hi
}

/// The cell `[t_off + m 2^{-4n}, …] × [x_off + l 2^{-2n}, …]`, which must
/// overlap `I × J` in positive area.
pub fn dyadic_cell(n: u32, m: i64, l: i64, origin: (f64, f64), i_win: Interval, j_win: Interval) -> Result<Rectangle> {
    let (ts, xs) = (DyadicCell::time_side(n), DyadicCell::space_side(n));
    let t0 = origin.0 + m as f64 * ts;
    let x0 = origin.1 + l as f64 * xs;
    if !overlaps(t0, t0 + ts, i_win) || !overlaps(x0, x0 + xs, j_win) {
        return Err(Error::Range(format!("cell (n={n}, m={m}, l={l}) misses I x J")));
    }
    Rectangle::new(t0, x0, ts, xs)
}

/// All level-`n` cells overlapping `I × J`.
pub fn cells_covering(n: u32, origin: (f64, f64), i_win: Interval, j_win: Interval) -> Vec<DyadicCell> {
    let (ts, xs) = (DyadicCell::time_side(n), DyadicCell::space_side(n));
    let m_lo = ((i_win.lo - origin.0) / ts).floor() as i64;
    let m_hi = ((i_win.hi - origin.0) / ts).ceil() as i64;
    let l_lo = ((j_win.lo - origin.1) / xs).floor() as i64;
    let l_hi = ((j_win.hi - origin.1) / xs).ceil() as i64;
    let mut out = Vec::new();
    for m in m_lo..m_hi {
        for l in l_lo..l_hi {
            if dyadic_cell(n, m, l, origin, i_win, j_win).is_ok() {
                out.push(DyadicCell { n, m, l });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SetKind {
    Singleton { point: Vec<f64> },
    Points { points: Vec<Vec<f64>> },
    Segment { start: Vec<f64>, end: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
    /// `corner + side·C^d` for the middle-thirds Cantor set `C`; `levels`
    /// is the construction depth used for distances and samples.
    CantorDust { corner: Vec<f64>, side: f64, levels: u32 },
}

/// Compact `A ⊆ [−M, M]^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSet {
    pub kind: SetKind,
    pub d: usize,
    pub m: f64,
}

/// Euclidean ball `B(center, radius)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ball {
    pub center: Vec<f64>,
    pub radius: f64,
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// Distance from `x` to the level-`levels` approximation of `C ⊂ [0, 1]`.
fn cantor_dist(x: f64, levels: u32) -> f64 {
    let (mut lo, mut w) = (0.0, 1.0);
    for _ in 0..levels {
        let third = w / 3.0;
        let (a_hi, b_lo) = (lo + third, lo + 2.0 * third);
        if x >= b_lo {
            lo = b_lo;
        } else if x > a_hi {
            return (x - a_hi).min(b_lo - x);
        }
        w = third;
    }
    if x < lo {
        lo - x
    } else if x > lo + w {
        x - lo - w
    } else {
        0.0
    }
}

/// Left endpoints of the `2^levels` construction intervals of `C`.
fn cantor_left_ends(levels: u32) -> Vec<f64> {
    let mut ends = vec![0.0];
    let mut w = 1.0;
    for _ in 0..levels {
        w /= 3.0;
        ends = ends.iter().flat_map(|&a| [a, a + 2.0 * w]).collect();
    }
    ends
}

impl TargetSet {
    pub fn new(kind: SetKind, m: f64) -> Result<Self> {
        let dims: Vec<usize> = match &kind {
            SetKind::Singleton { point } => vec![point.len()],
            SetKind::Points { points } => {
                if points.is_empty() {
                    return Err(Error::Config("point set is empty".into()));
                }
                points.iter().map(Vec::len).collect()
            }
            SetKind::Segment { start, end } => vec![start.len(), end.len()],
            SetKind::Ball { center, radius } => {
                if !(*radius >= 0.0) {
                    return Err(Error::Config(format!("ball radius {radius} must be >= 0")));
                }
                vec![center.len()]
            }
            SetKind::CantorDust { corner, side, .. } => {
                if !(*side > 0.0) {
                    return Err(Error::Config(format!("dust side {side} must be positive")));
                }
                vec![corner.len()]
            }
        };
        let d = dims[0];
        if d == 0 || dims.iter().any(|&k| k != d) {
            return Err(Error::Config("set coordinates must share a positive dimension".into()));
        }
        let set = Self { kind, d, m };
        let extent = set.sup_norm_extent();
        if !(m >= extent) {
            return Err(Error::Config(format!("set reaches |x|_inf = {extent} beyond M = {m}")));
        }
        Ok(set)
    }

    pub fn segment(start: Vec<f64>, end: Vec<f64>, m: f64) -> Result<Self> {
        Self::new(SetKind::Segment { start, end }, m)
    }

    pub fn singleton(point: Vec<f64>, m: f64) -> Result<Self> {
        Self::new(SetKind::Singleton { point }, m)
    }

    /// `max |x|_∞` over the set.
    fn sup_norm_extent(&self) -> f64 {
        let inf = |p: &[f64]| p.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        match &self.kind {
            SetKind::Singleton { point } => inf(point),
            SetKind::Points { points } => points.iter().map(|p| inf(p)).fold(0.0, f64::max),
            SetKind::Segment { start, end } => inf(start).max(inf(end)),
            SetKind::Ball { center, radius } => center.iter().fold(0.0f64, |a, c| a.max(c.abs() + radius)),
            SetKind::CantorDust { corner, side, .. } => {
                corner.iter().fold(0.0f64, |a, c| a.max(c.abs()).max((c + side).abs()))
            }
        }
    }

    /// Euclidean distance from `p` to the set.
    pub fn distance(&self, p: &[f64]) -> f64 {
        debug_assert_eq!(p.len(), self.d);
        match &self.kind {
            SetKind::Singleton { point } => norm(p.iter().zip(point).map(|(a, b)| a - b)),
            SetKind::Points { points } => points
                .iter()
                .map(|q| norm(p.iter().zip(q).map(|(a, b)| a - b)))
                .fold(f64::INFINITY, f64::min),
            SetKind::Segment { start, end } => {
                let dir: Vec<f64> = end.iter().zip(start).map(|(e, s)| e - s).collect();
                let len2: f64 = dir.iter().map(|x| x * x).sum();
                let proj: f64 = p.iter().zip(start).zip(&dir).map(|((x, s), d)| (x - s) * d).sum();
                let s = if len2 > 0.0 { (proj / len2).clamp(0.0, 1.0) } else { 0.0 };
                norm(p.iter().zip(start).zip(&dir).map(|((x, a), d)| x - a - s * d))
            }
            SetKind::Ball { center, radius } => {
                (norm(p.iter().zip(center).map(|(a, b)| a - b)) - radius).max(0.0)
            }
            SetKind::CantorDust { corner, side, levels } => {
                norm(p.iter().zip(corner).map(|(x, c)| side * cantor_dist((x - c) / side, *levels)))
            }
        }
    }

    /// Deterministic sample of `n_points` points of the set (fewer for
    /// finite sets).
    pub fn sample(&self, n_points: usize) -> Vec<Vec<f64>> {
        match &self.kind {
            SetKind::Singleton { point } => vec![point.clone()],
            SetKind::Points { points } => points.clone(),
            SetKind::Segment { start, end } => {
                let k = n_points.max(2);
                (0..k)
                    .map(|i| {
                        let s = i as f64 / (k - 1) as f64;
                        start.iter().zip(end).map(|(a, b)| a + s * (b - a)).collect()
                    })
                    .collect()
            }
            SetKind::Ball { center, radius } => {
                // Halton points of the cube, kept inside the ball.
                let primes = [2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
                let d = self.d.min(primes.len());
                let mut out = Vec::with_capacity(n_points);
                let mut i = 1u64;
                while out.len() < n_points && i < 1_000_000 {
                    let q: Vec<f64> = (0..self.d).map(|k| 2.0 * halton(i, primes[k % d]) - 1.0).collect();
                    if norm(q.iter().copied()) <= 1.0 {
                        out.push(center.iter().zip(&q).map(|(c, x)| c + radius * x).collect());
                    }
                    i += 1;
                }
                out
            }
            SetKind::CantorDust { corner, side, levels } => {
                let ends = cantor_left_ends(*levels);
                let per = ends.len();
                let total = (per as f64).powi(self.d as i32);
                let k = (n_points as f64).min(total) as usize;
                (0..k)
                    .map(|i| {
                        let mut idx = ((i as f64 + 0.5) * total / k as f64) as usize;
                        corner
                            .iter()
                            .map(|c| {
                                let e = ends[idx % per];
                                idx /= per;
                                c + side * e
                            })
                            .collect()
                    })
                    .collect()
            }
        }
    }
}

fn halton(mut i: u64, b: u64) -> f64 {
    let (mut f, mut r) = (1.0, 0.0);
    while i > 0 {
        f /= b as f64;
        r += f * (i % b) as f64;
        i /= b;
    }
    r
}

/// Finite cover of `A` by balls of radius `< epsilon`.
pub fn cover_set(a: &TargetSet, epsilon: f64) -> Result<Vec<Ball>> {
    if !(epsilon > 0.0) {
        return Err(Error::Domain(format!("epsilon = {epsilon} must be positive")));
    }
    let half = 0.5 * epsilon;
    Ok(match &a.kind {
        SetKind::Singleton { point } => vec![Ball { center: point.clone(), radius: half }],
        SetKind::Points { points } => points.iter().map(|p| Ball { center: p.clone(), radius: half }).collect(),
        SetKind::Segment { start, end } => {
            let len = norm(start.iter().zip(end).map(|(a, b)| b - a));
            if len == 0.0 {
                return Ok(vec![Ball { center: start.clone(), radius: half }]);
            }
            // K equal pieces of length len/K <= epsilon; each ball has the
            // piece as diameter, so Σ 2r = len.
            let k = (len / epsilon).ceil().max(1.0) as usize;
            let r = len / (2.0 * k as f64);
            (0..k)
                .map(|i| {
                    let s = (i as f64 + 0.5) / k as f64;
                    Ball { center: start.iter().zip(end).map(|(a, b)| a + s * (b - a)).collect(), radius: r }
                })
                .collect()
        }
        SetKind::Ball { center, radius } => {
            let d = a.d as f64;
            let side = 2.0 * 0.99 * epsilon / d.sqrt();
            let r = side * d.sqrt() / 2.0;
            let k = (2.0 * radius / side).ceil().max(1.0) as usize;
            let mut out = Vec::new();
            let mut idx = vec![0usize; a.d];
            loop {
                let c: Vec<f64> = center
                    .iter()
                    .zip(&idx)
                    .map(|(c0, &i)| c0 - radius + (i as f64 + 0.5) * side)
                    .collect();
                let cube_dist = norm(c.iter().zip(center).map(|(x, c0)| ((x - c0).abs() - side / 2.0).max(0.0)));
                if cube_dist <= *radius {
                    out.push(Ball { center: c, radius: r });
                }
                let mut p = 0;
                loop {
                    if p == a.d {
                        return Ok(out);
                    }
                    idx[p] += 1;
                    if idx[p] < k {
                        break;
                    }
                    idx[p] = 0;
                    p += 1;
                }
            }
        }
        SetKind::CantorDust { corner, side, levels } => {
            let d = a.d as f64;
            // Coarsest construction level whose cells fit in balls of radius < epsilon.
            let mut j = 0u32;
            while side * 3f64.powi(-(j as i32)) * d.sqrt() / 2.0 >= epsilon {
                j += 1;
            }
            let (level, sub) = if j <= *levels {
                (j, 1usize)
            } else {
                let cell = side * 3f64.powi(-(*levels as i32));
                (*levels, ((cell * d.sqrt() / 2.0) / (0.99 * epsilon)).ceil() as usize)
            };
            let w = side * 3f64.powi(-(level as i32)) / sub as f64;
            let r = w * d.sqrt() / 2.0;
            let ends = cantor_left_ends(level);
            let per = ends.len() * sub;
            let total = per.pow(a.d as u32);
            if total > 10_000_000 {
                return Err(Error::Resource(format!("dust cover needs {total} balls")));
            }
            (0..total)
                .map(|mut idx| {
                    let center = corner
                        .iter()
                        .map(|c| {
                            let k = idx % per;
                            idx /= per;
                            c + side * ends[k / sub] + ((k % sub) as f64 + 0.5) * w
                        })
                        .collect();
                    Ball { center, radius: r }
                })
                .collect()
        }
    })
}

/// Estimated probability with a Wilson 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HittingEstimate {
    pub p_hat: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub n_reps: usize,
    pub hits: u64,
    pub n: Option<u32>,
}

impl HittingEstimate {
    pub fn from_counts(hits: u64, n_reps: usize, n: Option<u32>) -> Self {
        Self::with_z(hits, n_reps, n, Z95)
    }

    pub fn with_z(hits: u64, n_reps: usize, n: Option<u32>, z: f64) -> Self {
        let (ci_lo, ci_hi) = wilson(hits, n_reps as u64, z);
        let p_hat = if n_reps == 0 { 0.0 } else { hits as f64 / n_reps as f64 };
        Self { p_hat, ci_lo, ci_hi, n_reps, hits, n }
    }
}

/// Shared settings of the field simulations behind the estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub sigma: SigmaSpec,
    pub dx: f64,
    pub pad: f64,
    pub master: u64,
    /// Maximal cell-steps per replication.
    pub budget: usize,
}

impl FieldConfig {
    pub fn new(sigma: SigmaSpec, dx: f64, master: u64) -> Self {
        Self { sigma, dx, pad: 6.0, master, budget: 1 << 30 }
    }

    pub(crate) fn grid(&self, window: Interval, horizon: f64) -> Result<GridSpec> {
        let g = GridSpec::covering(window, horizon, self.dx, self.pad)?;
        let cost = g.n_steps().saturating_mul(g.n_nodes());
        if cost > self.budget {
            return Err(Error::Resource(format!("{cost} cell-steps per component exceed the budget {}", self.budget)));
        }
        Ok(g)
    }
}

pub(crate) fn replication(rep: usize) -> Result<u32> {
    u32::try_from(rep).map_err(|_| Error::Range("replication index overflows u32".into()))
}

/// Values of one component of `U` on the nodes of `rect`, row-major
/// (time-major).
fn cell_values(cfg: &FieldConfig, grid: &GridSpec, rect: &Rectangle, component: u32, rep: u32) -> Result<Vec<f64>> {
    let b = rect.nodes(grid)?;
    let mut run = CoupledRun::new(grid, derive_seed(cfg.master, component, rep), Some(cfg.sigma.clone()), false)?;
    run.advance(b.n0)?;
    let mut out = Vec::with_capacity((b.n1 - b.n0 + 1) * (b.j1 - b.j0 + 1));
    out.extend_from_slice(&run.u()[b.j0..=b.j1]);
    for _ in b.n0..b.n1 {
        run.step()?;
        out.extend_from_slice(&run.u()[b.j0..=b.j1]);
    }
    Ok(out)
}

fn cell_grid(cfg: &FieldConfig, cell: &Rectangle) -> Result<GridSpec> {
    let grid = cfg.grid(Interval::new(cell.x0, cell.x0 + cell.zeta2), cell.t0 + cell.zeta1)?;
    match cell.nodes(&grid) {
        Err(Error::Config(m)) => Err(Error::Config(format!("unresolved cell: {m}"))),
        other => other.map(|_| grid),
    }
}

/// `P{min over cell nodes of |U − z0| ≤ threshold}` for `d = z0.len()`
/// independent components.
pub fn vector_small_ball_prob_at(
    z0: &[f64],
    cell: &Rectangle,
    threshold: f64,
    n_reps: usize,
    cfg: &FieldConfig,
) -> Result<HittingEstimate> {
    if z0.is_empty() || z0.len() > 8 {
        return Err(Error::Capability(format!("dimension {} outside 1..=8", z0.len())));
    }
    let grid = cell_grid(cfg, cell)?;
    let hits: Vec<bool> = (0..n_reps)
        .into_par_iter()
        .map(|rep| {
            let rep = replication(rep)?;
            let mut dist2: Option<Vec<f64>> = None;
            for (c, &z) in z0.iter().enumerate() {
                let vals = cell_values(cfg, &grid, cell, c as u32, rep)?;
                let acc = dist2.get_or_insert_with(|| vec![0.0; vals.len()]);
                for (a, x) in acc.iter_mut().zip(&vals) {
                    *a += (x - z) * (x - z);
                }
            }
            let min = dist2.expect("d >= 1").iter().copied().fold(f64::INFINITY, f64::min).sqrt();
            Ok(min <= threshold)
        })
        .collect::<Result<_>>()?;
    Ok(HittingEstimate::from_counts(hits.iter().filter(|&&h| h).count() as u64, n_reps, None))
}

pub fn vector_small_ball_prob(z0: &[f64], cell: &Rectangle, n: u32, n_reps: usize, cfg: &FieldConfig) -> Result<HittingEstimate> {
    let mut e = vector_small_ball_prob_at(z0, cell, 2f64.powi(-(n as i32)), n_reps, cfg)?;
    e.n = Some(n);
    Ok(e)
}

/// `P{min over cell nodes of |u − z| ≤ 2^{-n}}`.
pub fn small_ball_prob(z: f64, cell: &Rectangle, n: u32, n_reps: usize, cfg: &FieldConfig) -> Result<HittingEstimate> {
    vector_small_ball_prob(&[z], cell, n, n_reps, cfg)
}

/// Norm on `R^d` used by the ladder small-ball estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BallNorm {
    #[default]
    Euclidean,
    /// `max_i |x_i|`; its balls are products of intervals.
    Max,
}

/// Minimum distance from `U` to a point over a cell, in both norms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinDistance {
    pub euclidean: f64,
    pub max: f64,
}

impl MinDistance {
    pub fn get(&self, norm: BallNorm) -> f64 {
        match norm {
            BallNorm::Euclidean => self.euclidean,
            BallNorm::Max => self.max,
        }
    }
}

/// Per-replication minima of `|U − z0|` over each ladder level's cell, as
/// `[rep][level][k]` for the prefix dimensions `k + 1 = 1..=z0.len()`:
/// component `c` uses the same seed in every prefix that contains it.
pub fn ladder_min_distances(
    z0: &[f64],
    ladder_spec: &LadderSpec,
    n_reps: usize,
    master: u64,
) -> Result<Vec<Vec<Vec<MinDistance>>>> {
    if z0.is_empty() || z0.len() > 8 {
        return Err(Error::Capability(format!("dimension {} outside 1..=8", z0.len())));
    }
    let ladder = Ladder::new(ladder_spec.clone())?;
    let levels: Vec<u32> = ladder.levels().map(|v| v.n).collect();
    let cells = (2 * ladder_spec.nodes_per_side * ladder_spec.nodes_per_side + 1) * (ladder_spec.nodes_per_side + 1);
    let nodes = ladder_spec.nodes_per_side + 1;
    (0..n_reps)
        .into_par_iter()
        .map(|rep| {
            let rep = replication(rep)?;
            // Squared Euclidean and max distances per node.
            let mut sq = vec![vec![0.0; cells]; levels.len()];
            let mut mx = vec![vec![0.0f64; cells]; levels.len()];
            let mut out = vec![Vec::with_capacity(z0.len()); levels.len()];
            for (c, &z) in z0.iter().enumerate() {
                ladder.run(derive_seed(master, c as u32, rep), |view, row| {
                    let l = (view.n - levels[0]) as usize;
                    let range = row.step * nodes..(row.step + 1) * nodes;
                    for ((s, m), x) in sq[l][range.clone()].iter_mut().zip(&mut mx[l][range]).zip(row.u) {
                        let d = (x - z).abs();
                        *s += d * d;
                        *m = m.max(d);
                    }
                    Ok(())
                })?;
                for l in 0..levels.len() {
                    let min = |a: &[f64]| a.iter().copied().fold(f64::INFINITY, f64::min);
                    out[l].push(MinDistance { euclidean: min(&sq[l]).sqrt(), max: min(&mx[l]) });
                }
            }
            Ok(out)
        })
        .collect()
}

/// Settings of the direct hitting experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitWindow {
    pub i_win: Interval,
    pub j_win: Interval,
}

/// Tolerance `2·dx^{1/2}` used to observe hitting on grid nodes.
pub fn tol_hit(dx: f64) -> f64 {
    2.0 * dx.sqrt()
}

/// Closest approach of `U` to each set over the nodes of `I × J`, per
/// replication. All sets share the same fields (common random numbers).
pub fn hitting_distances(sets: &[TargetSet], win: &HitWindow, n_reps: usize, cfg: &FieldConfig) -> Result<Vec<Vec<f64>>> {
    let d = sets.first().ok_or_else(|| Error::Usage("no target sets".into()))?.d;
    if sets.iter().any(|s| s.d != d) {
        return Err(Error::Usage("target sets differ in dimension".into()));
    }
    let nodes = hit_nodes(win, cfg)?;
    (0..n_reps)
        .into_par_iter()
        .map(|rep| {
            let rep = replication(rep)?;
            let fields = component_fields(&nodes, d, rep, cfg)?;
            let mut point = vec![0.0; d];
            Ok(sets
                .iter()
                .map(|s| {
                    (0..nodes.count)
                        .map(|k| {
                            for (c, f) in fields.iter().enumerate() {
                                point[c] = f[k];
                            }
                            s.distance(&point)
                        })
                        .fold(f64::INFINITY, f64::min)
                })
                .collect())
        })
        .collect()
}

struct HitNodes {
    grid: GridSpec,
    n0: usize,
    n1: usize,
    j0: usize,
    j1: usize,
    count: usize,
}

fn hit_nodes(win: &HitWindow, cfg: &FieldConfig) -> Result<HitNodes> {
    if win.i_win.is_empty() || win.j_win.is_empty() || win.i_win.lo < 0.0 {
        return Err(Error::Usage("I and J must be intervals of positive length with I in [0, T]".into()));
    }
    let grid = cfg.grid(win.j_win, win.i_win.hi)?;
    let (n0, n1) = (grid.time_index(win.i_win.lo)?, grid.time_index(win.i_win.hi)?);
    let (j0, j1) = (grid.space_index(win.j_win.lo)?, grid.space_index(win.j_win.hi)?);
    Ok(HitNodes { grid, n0, n1, j0, j1, count: (n1 - n0 + 1) * (j1 - j0 + 1) })
}

/// Component values on the `I × J` nodes, time-major.
fn component_fields(nodes: &HitNodes, d: usize, rep: u32, cfg: &FieldConfig) -> Result<Vec<Vec<f64>>> {
    (0..d)
        .map(|c| {
            let mut run = CoupledRun::new(&nodes.grid, derive_seed(cfg.master, c as u32, rep), Some(cfg.sigma.clone()), false)?;
            run.advance(nodes.n0)?;
            let mut out = Vec::with_capacity(nodes.count);
            out.extend_from_slice(&run.u()[nodes.j0..=nodes.j1]);
            for _ in nodes.n0..nodes.n1 {
                run.step()?;
                out.extend_from_slice(&run.u()[nodes.j0..=nodes.j1]);
            }
            Ok(out)
        })
        .collect()
}

/// `P{U(I × J) ∩ A ≠ ∅}` observed on grid nodes at tolerance `tol_hit(dx)`.
pub fn hitting_prob_estimate(a: &TargetSet, win: &HitWindow, n_reps: usize, cfg: &FieldConfig) -> Result<HittingEstimate> {
    let tol = tol_hit(cfg.dx);
    let dists = hitting_distances(std::slice::from_ref(a), win, n_reps, cfg)?;
    let hits = dists.iter().filter(|d| d[0] <= tol).count() as u64;
    Ok(HittingEstimate::from_counts(hits, n_reps, None))
}

/// Covering-pipeline bound and the direct estimate on the same fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoveringBound {
    pub n: u32,
    pub n_balls: usize,
    pub n_cells: usize,
    /// `Σ_balls Σ_cells p̂(cell, ball)`.
    pub bound: f64,
    pub direct: HittingEstimate,
    pub tol_hit: f64,
}

/// Covers `A` by balls of radius `< 2^{-n}`, covers `I × J` by level-`n`
/// dyadic cells, and sums the per-(ball, cell) frequencies of
/// `min over cell ∩ (I × J) of |U − center| ≤ radius + tol_hit`. On common
/// fields this dominates the direct hitting frequency path by path.
pub fn covering_bound(a: &TargetSet, win: &HitWindow, n: u32, n_reps: usize, cfg: &FieldConfig) -> Result<CoveringBound> {
    let tol = tol_hit(cfg.dx);
    let balls = cover_set(a, 2f64.powi(-(n as i32)))?;
    let origin = (0.0, win.j_win.lo);
    let cells = cells_covering(n, origin, win.i_win, win.j_win);
    let nodes = hit_nodes(win, cfg)?;
    let g = nodes.grid;
    // Node blocks of each cell, clipped to I × J.
    let mut blocks = Vec::with_capacity(cells.len());
    for c in &cells {
        let r = dyadic_cell(c.n, c.m, c.l, origin, win.i_win, win.j_win)?;
        let t_lo = r.t0.max(win.i_win.lo);
        let t_hi = (r.t0 + r.zeta1).min(win.i_win.hi);
        let x_lo = r.x0.max(win.j_win.lo);
        let x_hi = (r.x0 + r.zeta2).min(win.j_win.hi);
        let (a0, a1) = (g.time_index(t_lo)? - nodes.n0, g.time_index(t_hi)? - nodes.n0);
        let (b0, b1) = (g.space_index(x_lo)? - nodes.j0, g.space_index(x_hi)? - nodes.j0);
        if a1 - a0 < 1 || b1 - b0 < 1 {
            return Err(Error::Config(format!("level-{n} cells are not resolved by dx = {}", cfg.dx)));
        }
        blocks.push((a0, a1, b0, b1));
    }
    let width = nodes.j1 - nodes.j0 + 1;
    let d = a.d;
    let per_rep: Vec<(u64, Vec<u32>)> = (0..n_reps)
        .into_par_iter()
        .map(|rep| {
            let rep = replication(rep)?;
            let fields = component_fields(&nodes, d, rep, cfg)?;
            let mut point = vec![0.0; d];
            let mut direct = false;
            for k in 0..nodes.count {
                for (c, f) in fields.iter().enumerate() {
                    point[c] = f[k];
                }
                if a.distance(&point) <= tol {
                    direct = true;
                    break;
                }
            }
            let mut counts = vec![0u32; balls.len() * blocks.len()];
            for (bi, ball) in balls.iter().enumerate() {
                for (ci, &(a0, a1, b0, b1)) in blocks.iter().enumerate() {
                    'cell: for s in a0..=a1 {
                        for x in b0..=b1 {
                            let k = s * width + x;
                            let dist = norm(fields.iter().zip(&ball.center).map(|(f, c)| f[k] - c));
                            if dist <= ball.radius + tol {
                                counts[bi * blocks.len() + ci] = 1;
                                break 'cell;
                            }
                        }
                    }
                }
            }
            Ok((u64::from(direct), counts))
        })
        .collect::<Result<_>>()?;
    let direct_hits = per_rep.iter().map(|p| p.0).sum();
    let total: u64 = per_rep.iter().map(|p| p.1.iter().map(|&c| u64::from(c)).sum::<u64>()).sum();
    Ok(CoveringBound {
        n,
        n_balls: balls.len(),
        n_cells: cells.len(),
        bound: total as f64 / n_reps as f64,
        direct: HittingEstimate::from_counts(direct_hits, n_reps, None),
        tol_hit: tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> Interval {
        Interval::new(0.0, 1.0)
    }

    #[test]
    fn dyadic_cell_formula() {
        let r = dyadic_cell(1, 0, 0, (0.0, 0.0), unit(), unit()).unwrap();
        assert_eq!((r.t0, r.zeta1, r.x0, r.zeta2), (0.0, 1.0 / 16.0, 0.0, 0.25));
        let r = dyadic_cell(2, 3, 1, (0.0, 0.0), unit(), unit()).unwrap();
        assert_eq!((r.t0, r.t0 + r.zeta1), (3.0 / 256.0, 4.0 / 256.0));
        assert_eq!((r.x0, r.x0 + r.zeta2), (1.0 / 16.0, 2.0 / 16.0));
        assert!(matches!(dyadic_cell(1, 40, 0, (0.0, 0.0), unit(), unit()), Err(Error::Range(_))));
    }

    #[test]
    fn cell_count_scales_like_two_to_six_n() {
        for n in 0..4 {
            let c = cells_covering(n, (0.0, 0.0), unit(), unit()).len();
            assert_eq!(c, 1 << (6 * n));
        }
        let c = cells_covering(2, (0.0, 0.0), Interval::new(0.01, 0.5), Interval::new(0.1, 0.7)).len();
        assert!(c as f64 <= 2f64.powi(12));
    }

    #[test]
    fn set_validation() {
        assert!(TargetSet::segment(vec![0.0, 0.0], vec![2.0, 0.0], 1.0).is_err());
        assert!(TargetSet::segment(vec![0.0, 0.0], vec![1.0], 1.0).is_err());
        assert!(TargetSet::new(SetKind::Points { points: vec![] }, 1.0).is_err());
    }

    #[test]
    fn distances() {
        let s = TargetSet::segment(vec![0.0, 0.0], vec![1.0, 0.0], 2.0).unwrap();
        assert_eq!(s.distance(&[0.5, 0.3]), 0.3);
        assert_eq!(s.distance(&[-3.0, 4.0]), 5.0);
        let b = TargetSet::new(SetKind::Ball { center: vec![0.0; 3], radius: 0.5 }, 1.0).unwrap();
        assert_eq!(b.distance(&[0.2, 0.0, 0.0]), 0.0);
        assert!((b.distance(&[1.0, 0.0, 0.0]) - 0.5).abs() < 1e-15);
        let dust = TargetSet::new(SetKind::CantorDust { corner: vec![0.0], side: 1.0, levels: 5 }, 1.0).unwrap();
        assert_eq!(dust.distance(&[0.0]), 0.0);
        assert!((dust.distance(&[0.5]) - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(dust.distance(&[2.0 / 3.0]), 0.0);
    }

    #[test]
    fn singleton_and_segment_covers() {
        let s = TargetSet::singleton(vec![0.1, 0.2], 1.0).unwrap();
        let c = cover_set(&s, 0.2).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].radius, 0.1);
        let seg = TargetSet::segment(vec![0.0], vec![1.0], 1.0).unwrap();
        let c = cover_set(&seg, 0.125).unwrap();
        assert!(c.len() <= 9 && c.iter().all(|b| b.radius < 0.125));
        let sum: f64 = c.iter().map(|b| 2.0 * b.radius).sum();
        assert!((sum - 1.0).abs() <= 2.0 * 0.125 * c.len() as f64);
    }

    #[test]
    fn covers_contain_samples() {
        let sets = [
            TargetSet::segment(vec![0.0, 0.1, -0.2], vec![0.4, -0.3, 0.5], 1.0).unwrap(),
            TargetSet::new(SetKind::Ball { center: vec![0.1, 0.0], radius: 0.3 }, 1.0).unwrap(),
            TargetSet::new(SetKind::CantorDust { corner: vec![0.0, 0.0], side: 0.9, levels: 4 }, 1.0).unwrap(),
            TargetSet::new(SetKind::Points { points: vec![vec![0.5, 0.5], vec![-0.5, 0.2]] }, 1.0).unwrap(),
        ];
        for s in &sets {
            for eps in [0.3, 0.07] {
                let cover = cover_set(s, eps).unwrap();
                assert!(cover.iter().all(|b| b.radius < eps));
                for p in s.sample(400) {
                    assert!(
                        cover.iter().any(|b| norm(p.iter().zip(&b.center).map(|(x, c)| x - c)) <= b.radius + 1e-12),
                        "{:?} uncovered at eps {eps}",
                        s.kind
                    );
                }
            }
        }
    }

    #[test]
    fn wilson_estimate_bounds() {
        let e = HittingEstimate::from_counts(3, 100, Some(2));
        assert!(e.ci_lo <= e.p_hat && e.p_hat <= e.ci_hi);
        assert_eq!(e.p_hat, 0.03);
    }
}
