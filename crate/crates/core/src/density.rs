//! Joint law of `F = (u(t0, x0), sup_rect (v − v(t0, x0)))`: sampling,
//! product-Gaussian kernel density estimates, and checks against the
//! Gaussian-type bound `(c/√ζ) exp(−(z1² + z2²/ζ)/c)` and the Borell tail.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coupling::{Rectangle, MIN_STEPS_PER_SIDE};
use crate::error::{Error, Result};
use crate::hitting::{replication, FieldConfig};
use crate::noise::{derive_seed, Interval};
use crate::solver::{CoupledRun, FieldSolution, SolutionKind};
use crate::stats::{mean, quantile, variance};

pub const MIN_KDE_SAMPLES: usize = 1_000;
pub const MIN_TAIL_SAMPLES: usize = 10_000;
pub const DEFAULT_GRID_POINTS: usize = 81;

/// `ζ = max(ζ1^{1/2}, ζ2)`, so that `√ζ = max(ζ1^{1/4}, ζ2^{1/2})`.
pub fn scale_of(rect: &Rectangle) -> f64 {
    rect.zeta1.sqrt().max(rect.zeta2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FSamples {
    /// `(f1, f2)` per rectangle copy, path-major.
    pub pairs: Vec<(f64, f64)>,
    /// Largest sample variance of `v(t,x) − v(t0,x0)` over the rectangle nodes.
    pub sigma2_sup: f64,
    pub zeta: f64,
}

impl FSamples {
    pub fn f2(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.1).collect()
    }
}

/// `(f1, f2)` read off solved fields `u` and `v`.
pub fn f_pair(u: &FieldSolution, v: &FieldSolution, rect: &Rectangle) -> Result<(f64, f64)> {
    if v.kind != SolutionKind::Linear || u.seed != v.seed || u.grid != v.grid {
        return Err(Error::Coupling("need u and the linear v of the same noise".into()));
    }
    let b = rect.nodes(&v.grid)?;
    let v0 = v.values[[b.n0, b.j0]];
    let mut f2 = 0.0f64;
    for n in b.n0..=b.n1 {
        for j in b.j0..=b.j1 {
            f2 = f2.max(v.values[[n, j]] - v0);
        }
    }
    Ok((u.values[[b.n0, b.j0]], f2))
}

/// One `(f1, f2)` per replication.
pub fn sample_f(rect: &Rectangle, n_reps: usize, cfg: &FieldConfig) -> Result<FSamples> {
    sample_f_translated(rect, 1, n_reps, cfg)
}

/// `copies` side-by-side translates `rect + (0, k·ζ2)` of the rectangle on
/// each of `n_paths` fields. Translates are identically distributed (the
/// equation starts from zero and the noise is stationary in space) but
/// not independent.
pub fn sample_f_translated(rect: &Rectangle, copies: usize, n_paths: usize, cfg: &FieldConfig) -> Result<FSamples> {
    if copies == 0 || n_paths == 0 {
        return Err(Error::Domain("need at least one path and one copy".into()));
    }
    let width = rect.zeta2 * copies as f64;
    let window = Interval::new(rect.x0, rect.x0 + width.max(cfg.dx));
    let grid = cfg.grid(window, rect.t0 + rect.zeta1)?;
    let b = rect.nodes(&grid)?;
    let (rows, cols) = (b.n1 - b.n0, b.j1 - b.j0);
    if !rect.is_degenerate() && rows.min(cols) < MIN_STEPS_PER_SIDE {
        return Err(Error::Config("rectangle under-resolved".into()));
    }
    let anchors: Vec<usize> = (0..copies).map(|k| b.j0 + k * cols).collect();
    if anchors.last().map_or(true, |&j| j + cols >= grid.n_nodes()) {
        return Err(Error::Config("rectangle copies leave the grid".into()));
    }
    let cells = (rows + 1) * (cols + 1);

    struct PathOut {
        pairs: Vec<(f64, f64)>,
        s1: Vec<f64>,
        s2: Vec<f64>,
    }
    let outs: Vec<PathOut> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let seed = derive_seed(cfg.master, 0, replication(p)?);
            let mut run = CoupledRun::new(&grid, seed, Some(cfg.sigma.clone()), true)?;
            run.advance(b.n0)?;
            let f1: Vec<f64> = anchors.iter().map(|&j| run.u()[j]).collect();
            let v0: Vec<f64> = anchors.iter().map(|&j| run.v().expect("linear solved")[j]).collect();
            let mut f2 = vec![0.0f64; copies];
            let (mut s1, mut s2) = (vec![0.0; cells], vec![0.0; cells]);
            for r in 0..=rows {
                if r > 0 {
                    run.step()?;
                }
                let v = run.v().expect("linear solved");
                for (k, &j) in anchors.iter().enumerate() {
                    for c in 0..=cols {
                        let inc = v[j + c] - v0[k];
                        f2[k] = f2[k].max(inc);
                        s1[r * (cols + 1) + c] += inc;
                        s2[r * (cols + 1) + c] += inc * inc;
                    }
                }
            }
            Ok(PathOut { pairs: f1.into_iter().zip(f2).collect(), s1, s2 })
        })
        .collect::<Result<_>>()?;

    let mut pairs = Vec::with_capacity(n_paths * copies);
    let (mut s1, mut s2) = (vec![0.0; cells], vec![0.0; cells]);
    for o in outs {
        pairs.extend(o.pairs);
        for i in 0..cells {
            s1[i] += o.s1[i];
            s2[i] += o.s2[i];
        }
    }
    let n = pairs.len() as f64;
    let sigma2_sup = if n > 1.0 {
        s1.iter()
            .zip(&s2)
            .map(|(a, b)| ((b - a * a / n) / (n - 1.0)).max(0.0))
            .fold(0.0, f64::max)
    } else {
        0.0
    };
    Ok(FSamples { pairs, sigma2_sup, zeta: scale_of(rect) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub z1_axis: Vec<f64>,
    pub z2_axis: Vec<f64>,
    /// `p_hat[[i, j]]` at `(z1_axis[i], z2_axis[j])`.
    pub p_hat: Array2<f64>,
    /// Standard error of each `p_hat` entry: the standard deviation of the
    /// kernel terms over `√n`, which is the bootstrap standard error with
    /// infinitely many resamples.
    pub se: Array2<f64>,
    pub bandwidths: (f64, f64),
    pub n_samples: usize,
    pub zeta: Option<f64>,
    /// Some axis had zero spread.
    pub degenerate: bool,
}

impl DensityGrid {
    pub fn with_zeta(mut self, zeta: f64) -> Self {
        self.zeta = Some(zeta);
        self
    }

    /// Trapezoid integral of `p_hat` over the grid.
    pub fn integral(&self) -> f64 {
        let w = |axis: &[f64], i: usize| {
            let n = axis.len();
            let left = if i > 0 { axis[i] - axis[i - 1] } else { 0.0 };
            let right = if i + 1 < n { axis[i + 1] - axis[i] } else { 0.0 };
            0.5 * (left + right)
        };
        let mut total = 0.0;
        for (i, row) in self.p_hat.outer_iter().enumerate() {
            let wi = w(&self.z1_axis, i);
            for (j, p) in row.iter().enumerate() {
                total += wi * w(&self.z2_axis, j) * p;
            }
        }
        total
    }
}

/// Silverman's rule for one axis of a two-dimensional product kernel,
/// `min(sd, IQR/1.349)·n^{-1/6}`.
pub fn silverman(xs: &[f64]) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let sd = variance(xs).max(0.0).sqrt();
    let iqr = (quantile(&s, 0.75) - quantile(&s, 0.25)) / 1.349;
    let spread = if iqr > 0.0 { sd.min(iqr) } else { sd };
    spread * (xs.len() as f64).powf(-1.0 / 6.0)
}

pub fn kde2(samples: &[(f64, f64)], bandwidths: Option<(f64, f64)>) -> Result<DensityGrid> {
    kde2_on(samples, bandwidths, DEFAULT_GRID_POINTS)
}

/// Product-Gaussian KDE on an `n_grid × n_grid` grid spanning the sample
/// range plus one bandwidth on each side.
pub fn kde2_on(samples: &[(f64, f64)], bandwidths: Option<(f64, f64)>, n_grid: usize) -> Result<DensityGrid> {
    let n = samples.len();
    if n < MIN_KDE_SAMPLES {
        return Err(Error::Insufficient(format!("KDE needs >= {MIN_KDE_SAMPLES} samples, got {n}")));
    }
    if n_grid < 2 {
        return Err(Error::Domain("evaluation grid needs >= 2 points per axis".into()));
    }
    let a: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let b: Vec<f64> = samples.iter().map(|s| s.1).collect();
    let (mut h1, mut h2) = bandwidths.unwrap_or_else(|| (silverman(&a), silverman(&b)));
    let degenerate = !(h1 > 0.0 && h2 > 0.0);
    if let Some((x, y)) = bandwidths {
        if !(x > 0.0 && y > 0.0) {
            return Err(Error::Domain(format!("bandwidths ({x}, {y}) must be positive")));
        }
    }
    // A point mass still gets a finite (and flagged) estimate.
    let floor = |h: f64, xs: &[f64]| if h > 0.0 { h } else { 1e-3 * xs[0].abs().max(1.0) };
    h1 = floor(h1, &a);
    h2 = floor(h2, &b);
    let axis = |xs: &[f64], h: f64| -> Vec<f64> {
        let lo = xs.iter().copied().fold(f64::INFINITY, f64::min) - h;
        let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max) + h;
        (0..n_grid).map(|i| lo + (hi - lo) * i as f64 / (n_grid - 1) as f64).collect()
    };
    let (ax1, ax2) = (axis(&a, h1), axis(&b, h2));
    let phi = |z: f64, h: f64| {
        let u = z / h;
        if u.abs() > 8.0 {
            0.0
        } else {
            (-0.5 * u * u).exp() / (h * (2.0 * std::f64::consts::PI).sqrt())
        }
    };
    let ka: Vec<Vec<f64>> = ax1.iter().map(|&z| a.iter().map(|&x| phi(z - x, h1)).collect()).collect();
    let kb: Vec<Vec<f64>> = ax2.iter().map(|&z| b.iter().map(|&x| phi(z - x, h2)).collect()).collect();
    let nf = n as f64;
    let cells: Vec<(f64, f64)> = (0..n_grid * n_grid)
        .into_par_iter()
        .map(|idx| {
            let (ra, rb) = (&ka[idx / n_grid], &kb[idx % n_grid]);
            let (mut s1, mut s2) = (0.0, 0.0);
            for (x, y) in ra.iter().zip(rb) {
                let k = x * y;
                s1 += k;
                s2 += k * k;
            }
            let m = s1 / nf;
            let var = (s2 / nf - m * m).max(0.0);
            (m, (var / nf).sqrt())
        })
        .collect();
    let p_hat = Array2::from_shape_fn((n_grid, n_grid), |(i, j)| cells[i * n_grid + j].0);
    let se = Array2::from_shape_fn((n_grid, n_grid), |(i, j)| cells[i * n_grid + j].1);
    Ok(DensityGrid {
        z1_axis: ax1,
        z2_axis: ax2,
        p_hat,
        se,
        bandwidths: (h1, h2),
        n_samples: n,
        zeta: None,
        degenerate,
    })
}

/// `(c/√ζ) exp(−(z1² + z2²/ζ)/c)`.
pub fn gaussian_bound(c: f64, zeta: f64, z1: f64, z2: f64) -> f64 {
    c / zeta.sqrt() * (-(z1 * z1 + z2 * z2 / zeta) / c).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub c: f64,
    pub zeta: f64,
    /// Largest `max(p_hat − se, 0) / bound` over grid points with `z2 ≥ √ζ`.
    pub max_ratio: f64,
    pub argmax: (f64, f64),
    pub n_points: usize,
    /// Smallest `c` with every ratio `≤ 1`.
    pub c_min: f64,
}

impl BoundReport {
    pub fn holds(&self) -> bool {
        self.max_ratio <= 1.0
    }
}

fn restricted(grid: &DensityGrid, zeta: f64) -> Vec<(f64, f64, f64)> {
    let floor = zeta.sqrt();
    let mut out = Vec::new();
    for (i, &z1) in grid.z1_axis.iter().enumerate() {
        for (j, &z2) in grid.z2_axis.iter().enumerate() {
            if z2 >= floor {
                out.push((z1, z2, (grid.p_hat[[i, j]] - grid.se[[i, j]]).max(0.0)));
            }
        }
    }
    out
}

fn max_ratio(points: &[(f64, f64, f64)], c: f64, zeta: f64) -> (f64, (f64, f64)) {
    points.iter().fold((0.0, (f64::NAN, f64::NAN)), |best, &(z1, z2, p)| {
        let r = if p == 0.0 { 0.0 } else { p / gaussian_bound(c, zeta, z1, z2) };
        if r > best.0 {
            (r, (z1, z2))
        } else {
            best
        }
    })
}

/// The bound is increasing in `c` at every point, so the largest ratio is
/// decreasing in `c` and `c_min` is found by bisection.
pub fn check_gaussian_bound(grid: &DensityGrid, c: f64) -> Result<BoundReport> {
    let zeta = grid.zeta.ok_or_else(|| Error::Domain("density grid carries no scale".into()))?;
    if !(c > 0.0) {
        return Err(Error::Domain(format!("bound constant {c} must be positive")));
    }
    let points = restricted(grid, zeta);
    if points.is_empty() {
        return Err(Error::Domain(format!("no grid points with z2 >= {}", zeta.sqrt())));
    }
    let (ratio, argmax) = max_ratio(&points, c, zeta);
    let c_min = if points.iter().all(|p| p.2 == 0.0) {
        0.0
    } else {
        let (mut lo, mut hi) = (1e-6f64, 1.0f64);
        while max_ratio(&points, hi, zeta).0 > 1.0 {
            lo = hi;
            hi *= 2.0;
        }
        for _ in 0..100 {
            let mid = (lo * hi).sqrt();
            if max_ratio(&points, mid, zeta).0 > 1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    };
    Ok(BoundReport { c, zeta, max_ratio: ratio, argmax, n_points: points.len(), c_min })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailPoint {
    pub z2: f64,
    pub exceedance: f64,
    /// `2 exp(−(z2 − E F2)²/(2σ²))`; `None` below the mean, where the
    /// inequality says nothing.
    pub bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailFit {
    pub mean_f2: f64,
    pub sigma2_sup: f64,
    pub zeta: f64,
    /// Smallest `C` such that `σ² = Cζ` in the bound covers every tested
    /// exceedance.
    pub c_fit: f64,
    pub points: Vec<TailPoint>,
}

impl TailFit {
    /// Every valid point lies below its plug-in bound.
    pub fn holds(&self) -> bool {
        self.points.iter().all(|p| p.bound.map_or(true, |b| p.exceedance <= b))
    }
}

/// Empirical `P[F2 > k√ζ]` for `k = 1, 2, 3` against the Borell bound with
/// plug-in mean and variance.
pub fn borell_tail_check(f2: &[f64], zeta: f64, sigma2_sup: f64) -> Result<TailFit> {
    if f2.len() < MIN_TAIL_SAMPLES {
        return Err(Error::Insufficient(format!("tail check needs >= {MIN_TAIL_SAMPLES} samples, got {}", f2.len())));
    }
    if !(zeta > 0.0) || !(sigma2_sup >= 0.0) {
        return Err(Error::Domain(format!("bad scale {zeta} or variance {sigma2_sup}")));
    }
    let m = mean(f2);
    let n = f2.len() as f64;
    let mut c_fit: f64 = 0.0;
    let points = [1.0, 2.0, 3.0]
        .iter()
        .map(|k| {
            let z2 = k * zeta.sqrt();
            let exceedance = f2.iter().filter(|&&x| x > z2).count() as f64 / n;
            let bound = (z2 >= m).then(|| {
                if sigma2_sup > 0.0 {
                    (2.0 * (-(z2 - m).powi(2) / (2.0 * sigma2_sup)).exp()).min(1.0)
                } else {
                    0.0
                }
            });
            if z2 >= m && exceedance > 0.0 && exceedance < 2.0 {
                c_fit = c_fit.max((z2 - m).powi(2) / (2.0 * zeta * (2.0 / exceedance).ln()));
            }
            TailPoint { z2, exceedance, bound }
        })
        .collect();
    Ok(TailFit { mean_f2: m, sigma2_sup, zeta, c_fit, points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::SigmaSpec;

    fn cfg(dx: f64) -> FieldConfig {
        FieldConfig::new(SigmaSpec::default_sine(), dx, 17)
    }

    #[test]
    fn degenerate_rectangle_gives_zero_f2() {
        let rect = Rectangle::point(0.125, 0.0);
        let s = sample_f(&rect, 8, &cfg(1.0 / 16.0)).unwrap();
        assert!(s.pairs.iter().all(|p| p.1 == 0.0));
        assert_eq!(s.sigma2_sup, 0.0);
    }

    #[test]
    fn f2_is_nonnegative_and_copies_line_up() {
        let rect = Rectangle::new(1.0 / 32.0, 0.0, 1.0 / 64.0, 1.0 / 8.0).unwrap();
        let one = sample_f(&rect, 4, &cfg(1.0 / 64.0)).unwrap();
        let many = sample_f_translated(&rect, 3, 4, &cfg(1.0 / 64.0)).unwrap();
        assert_eq!(many.pairs.len(), 12);
        assert!(many.pairs.iter().all(|p| p.1 >= 0.0));
        assert!(one.sigma2_sup > 0.0);
        assert_eq!(one.zeta, 1.0 / 8.0);
    }

    #[test]
    fn point_mass_is_flagged() {
        let s = vec![(0.5, 0.5); 2000];
        assert!(kde2(&s, None).unwrap().degenerate);
        assert!(kde2(&s[..10], None).is_err());
    }

    #[test]
    fn zero_grid_has_zero_ratio() {
        let g = DensityGrid {
            z1_axis: vec![0.0, 1.0],
            z2_axis: vec![0.0, 1.0],
            p_hat: Array2::zeros((2, 2)),
            se: Array2::zeros((2, 2)),
            bandwidths: (0.1, 0.1),
            n_samples: 1000,
            zeta: Some(0.25),
            degenerate: false,
        };
        let r = check_gaussian_bound(&g, 0.3).unwrap();
        assert_eq!(r.max_ratio, 0.0);
        assert_eq!(r.c_min, 0.0);
        assert_eq!(r.n_points, 2);
        assert!(check_gaussian_bound(&g.clone().with_zeta(4.0), 1.0).is_err());
    }

    #[test]
    fn tail_check_restricts_below_mean() {
        let f2: Vec<f64> = (0..20_000).map(|i| 1.0 + (i % 100) as f64 * 0.01).collect();
        let t = borell_tail_check(&f2, 0.25, 0.1).unwrap();
        assert_eq!(t.points[0].exceedance, 1.0);
        assert!(t.points[0].bound.is_none());
        assert!(t.points.windows(2).all(|w| w[1].exceedance <= w[0].exceedance));
    }
}
