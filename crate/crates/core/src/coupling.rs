//! Coupling residual `L = u − u(t0,x0) − σ(u(t0,x0))·(v − v(t0,x0))` between
//! the nonlinear solution and its Gaussian linearization, its sup over
//! anisotropic rectangles, moment estimates and exponent fits.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hitting::{replication, FieldConfig};
use crate::noise::{derive_seed, GridSpec, Interval};
use crate::solver::{CoupledRun, FieldSolution, Ladder, LadderSpec, SigmaSpec, SolutionKind};
use crate::stats;

/// Minimal grid resolution of a rectangle side, in steps.
pub const MIN_STEPS_PER_SIDE: usize = 8;

/// `[t0, t0 + zeta1] × [x0, x0 + zeta2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rectangle {
    pub t0: f64,
    pub x0: f64,
    pub zeta1: f64,
    pub zeta2: f64,
}

/// Node index ranges (inclusive) of a rectangle on a grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeBox {
    pub n0: usize,
    pub n1: usize,
    pub j0: usize,
    pub j1: usize,
}

impl Rectangle {
    pub fn new(t0: f64, x0: f64, zeta1: f64, zeta2: f64) -> Result<Self> {
        let ok = |z: f64| z > 0.0 && z <= 1.0;
        if !ok(zeta1) || !ok(zeta2) {
            return Err(Error::Domain(format!("rectangle sides ({zeta1}, {zeta2}) must lie in (0, 1]")));
        }
        if !t0.is_finite() || !x0.is_finite() || t0 < 0.0 {
            return Err(Error::Domain(format!("bad rectangle anchor ({t0}, {x0})")));
        }
        Ok(Self { t0, x0, zeta1, zeta2 })
    }

    /// The degenerate rectangle reduced to its anchor.
    pub fn point(t0: f64, x0: f64) -> Self {
        Self { t0, x0, zeta1: 0.0, zeta2: 0.0 }
    }

    pub fn is_degenerate(&self) -> bool {
        self.zeta1 == 0.0 && self.zeta2 == 0.0
    }

    /// `max(zeta1^{1/4}, zeta2^{1/2})`.
    pub fn eta(&self) -> f64 {
        self.zeta1.powf(0.25).max(self.zeta2.sqrt())
    }

    /// Aligns the rectangle to `grid`. Non-degenerate rectangles need at
    /// least [`MIN_STEPS_PER_SIDE`] steps per side.
    pub fn nodes(&self, grid: &GridSpec) -> Result<NodeBox> {
        let n0 = grid.time_index(self.t0)?;
        let n1 = grid.time_index(self.t0 + self.zeta1)?;
        let j0 = grid.space_index(self.x0)?;
        let j1 = grid.space_index(self.x0 + self.zeta2)?;
        if !self.is_degenerate() && (n1 - n0 < MIN_STEPS_PER_SIDE || j1 - j0 < MIN_STEPS_PER_SIDE) {
            return Err(Error::Config(format!(
                "rectangle spans {} x {} steps; the grid must resolve each side with >= {MIN_STEPS_PER_SIDE}",
                n1 - n0,
                j1 - j0
            )));
        }
        Ok(NodeBox { n0, n1, j0, j1 })
    }
}

/// `|u − u0 − σ(u0)(v − v0)|` with `s0 = σ(u0)`.
#[inline]
pub fn residual(u: f64, u0: f64, v: f64, v0: f64, s0: f64) -> f64 {
    (u - u0 - s0 * (v - v0)).abs()
}

fn check_pair(u: &FieldSolution, v: &FieldSolution, sigma: &SigmaSpec) -> Result<()> {
    if u.seed != v.seed {
        return Err(Error::Coupling(format!(
            "u and v were driven by different noises ({:?} vs {:?})",
            u.seed, v.seed
        )));
    }
    if u.grid != v.grid {
        return Err(Error::Coupling("u and v live on different grids".into()));
    }
    if v.kind != SolutionKind::Linear {
        return Err(Error::Coupling("v must be the linear solution".into()));
    }
    if let Some(s) = &u.sigma {
        if s != sigma {
            return Err(Error::Coupling("sigma differs from the one used to solve u".into()));
        }
    }
    Ok(())
}

/// Max over grid nodes of the rectangle of `|L(t, x)|`.
pub fn coupling_residual_sup(
    u: &FieldSolution,
    v: &FieldSolution,
    sigma: &SigmaSpec,
    rect: &Rectangle,
) -> Result<f64> {
    check_pair(u, v, sigma)?;
    let b = rect.nodes(&u.grid)?;
    let (u0, v0) = (u.values[[b.n0, b.j0]], v.values[[b.n0, b.j0]]);
    let s0 = sigma.eval(u0);
    let mut sup = 0.0f64;
    for n in b.n0..=b.n1 {
        for j in b.j0..=b.j1 {
            sup = sup.max(residual(u.values[[n, j]], u0, v.values[[n, j]], v0, s0));
        }
    }
    Ok(sup)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Temporal,
    Spatial,
}

/// `|L(t, x)|` at a single target that shares the anchor's `x`
/// (temporal) or `t` (spatial).
pub fn directional_residual(
    u: &FieldSolution,
    v: &FieldSolution,
    sigma: &SigmaSpec,
    anchor: (f64, f64),
    target: (f64, f64),
    direction: Direction,
) -> Result<f64> {
    check_pair(u, v, sigma)?;
    let g = &u.grid;
    let (na, ja) = (g.time_index(anchor.0)?, g.space_index(anchor.1)?);
    let (nt, jt) = (g.time_index(target.0)?, g.space_index(target.1)?);
    match direction {
        Direction::Temporal if jt != ja || nt < na => {
            return Err(Error::Usage("temporal target must share x0 and satisfy t >= t0".into()))
        }
        Direction::Spatial if nt != na => return Err(Error::Usage("spatial target must share t0".into())),
        _ => {}
    }
    let (u0, v0) = (u.values[[na, ja]], v.values[[na, ja]]);
    Ok(residual(u.values[[nt, jt]], u0, v.values[[nt, jt]], v0, sigma.eval(u0)))
}

/// `sup |L|` over every ladder rectangle, as `[rep][level]`. The anchor of
/// level `n` is the rectangle's `(t0, x0)`.
pub fn ladder_residual_sups(spec: &LadderSpec, n_reps: usize, master: u64) -> Result<Vec<Vec<f64>>> {
    let sigma = spec
        .sigma
        .clone()
        .ok_or_else(|| Error::Usage("coupling needs the nonlinear solution; set sigma".into()))?;
    let ladder = Ladder::new(LadderSpec { with_linear: true, ..spec.clone() })?;
    let n_levels = ladder.levels().count();
    let n_min = spec.n_min;
    (0..n_reps)
        .into_par_iter()
        .map(|rep| {
            let mut sups = vec![0.0f64; n_levels];
            let mut anchor = (0.0, 0.0, 0.0);
            ladder.run(derive_seed(master, 0, replication(rep)?), |view, row| {
                let v = row.v.expect("linear solution requested");
                if row.step == 0 {
                    anchor = (row.u[0], v[0], sigma.eval(row.u[0]));
                }
                let (u0, v0, s0) = anchor;
                let l = (view.n - n_min) as usize;
                for (&u, &vv) in row.u.iter().zip(v) {
                    sups[l] = sups[l].max(residual(u, u0, vv, v0, s0));
                }
                Ok(())
            })?;
            Ok(sups)
        })
        .collect()
}

/// `L` at lagged targets of every anchor `(t0, x)` with `x` in `anchors`,
/// streamed on one field per replication. Temporal lags count time steps,
/// spatial lags count space steps. Returns `[lag][rep · anchors + k]`.
pub fn directional_samples(
    cfg: &FieldConfig,
    t0: f64,
    anchors: &[f64],
    lags: &[usize],
    direction: Direction,
    n_reps: usize,
) -> Result<Vec<Vec<f64>>> {
    if anchors.is_empty() || lags.is_empty() {
        return Err(Error::Domain("need at least one anchor and one lag".into()));
    }
    if lags.windows(2).any(|w| w[1] <= w[0]) || lags[0] == 0 {
        return Err(Error::Domain("lags must be positive and increasing".into()));
    }
    let max_lag = *lags.last().expect("non-empty") as f64;
    let lo = anchors.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = anchors.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let dt = 0.5 * cfg.dx * cfg.dx;
    let (window, horizon) = match direction {
        Direction::Spatial => (Interval::new(lo, hi + max_lag * cfg.dx), t0),
        Direction::Temporal => (Interval::new(lo, hi.max(lo + cfg.dx)), t0 + max_lag * dt),
    };
    let grid = cfg.grid(window, horizon)?;
    let n0 = grid.time_index(t0)?;
    let js: Vec<usize> = anchors.iter().map(|&x| grid.space_index(x)).collect::<Result<_>>()?;
    let per_rep: Vec<Vec<Vec<f64>>> = (0..n_reps)
        .into_par_iter()
        .map(|rep| {
            let seed = derive_seed(cfg.master, 0, replication(rep)?);
            let mut run = CoupledRun::new(&grid, seed, Some(cfg.sigma.clone()), true)?;
            run.advance(n0)?;
            let base: Vec<(f64, f64, f64)> = js
                .iter()
                .map(|&j| {
                    let u0 = run.u()[j];
                    (u0, run.v().expect("linear solved")[j], cfg.sigma.eval(u0))
                })
                .collect();
            let at = |run: &CoupledRun, off: usize| -> Vec<f64> {
                let (u, v) = (run.u(), run.v().expect("linear solved"));
                js.iter().zip(&base).map(|(&j, &(u0, v0, s0))| residual(u[j + off], u0, v[j + off], v0, s0)).collect()
            };
            let mut out = Vec::with_capacity(lags.len());
            match direction {
                Direction::Spatial => out.extend(lags.iter().map(|&l| at(&run, l))),
                Direction::Temporal => {
                    let mut done = 0;
                    for &l in lags {
                        run.advance(l - done)?;
                        done = l;
                        out.push(at(&run, 0));
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok((0..lags.len()).map(|i| per_rep.iter().flat_map(|r| r[i].iter().copied()).collect()).collect())
}

/// Estimate of `‖X‖_p = E[|X|^p]^{1/p}` with a 95% percentile-bootstrap interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub p: f64,
    pub value: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub n_reps: usize,
}

/// Minimal replications for a bootstrap interval.
pub const MIN_REPS: usize = 30;

impl MomentEstimate {
    pub fn from_samples(samples: &[f64], p: f64, bootstrap: usize, seed: u64) -> Result<Self> {
        if !(p >= 1.0) {
            return Err(Error::Domain(format!("moment order {p} must be >= 1")));
        }
        if samples.len() < MIN_REPS {
            return Err(Error::Insufficient(format!(
                "{} replications; moment intervals need >= {MIN_REPS}",
                samples.len()
            )));
        }
        let powered: Vec<f64> = samples.iter().map(|x| x.abs().powf(p)).collect();
        let norm = |m: f64| m.powf(1.0 / p);
        let value = norm(stats::mean(&powered));
        let (lo, hi) = stats::bootstrap_ci(&powered, bootstrap, 0.05, seed, stats::mean);
        Ok(Self {
            p,
            value,
            ci_lo: norm(lo).min(value),
            ci_hi: norm(hi).max(value),
            n_reps: samples.len(),
        })
    }
}

/// Runs `sampler(i)` for `i in 0..n_reps` (in parallel, ordered by `i`) and
/// estimates its `p`-th moment norm.
pub fn estimate_moment<F>(sampler: F, p: f64, n_reps: usize, bootstrap: usize, seed: u64) -> Result<MomentEstimate>
where
    F: Fn(usize) -> Result<f64> + Sync,
{
    let samples: Vec<f64> = (0..n_reps).into_par_iter().map(&sampler).collect::<Result<_>>()?;
    MomentEstimate::from_samples(&samples, p, bootstrap, seed)
}

/// Log-log least-squares fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub slope: f64,
    pub intercept: f64,
    pub stderr: f64,
    pub r2: f64,
}

/// Regresses `ln value` on `ln size`; the slope is the scaling exponent.
pub fn fit_exponent(scales: &[(f64, f64)]) -> Result<FitResult> {
    if scales.len() < 3 {
        return Err(Error::Insufficient(format!("exponent fits need >= 3 scales, got {}", scales.len())));
    }
    if scales.iter().any(|&(s, v)| !(s > 0.0) || !(v > 0.0)) {
        return Err(Error::Domain("exponent fits need strictly positive sizes and values".into()));
    }
    let xs: Vec<f64> = scales.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = scales.iter().map(|p| p.1.ln()).collect();
    let f = stats::ols(&xs, &ys)?;
    Ok(FitResult { slope: f.slope, intercept: f.intercept, stderr: f.stderr, r2: f.r2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{derive_seed, sample_noise, Interval};
    use crate::solver::{solve_linear, solve_nonlinear};

    fn pair(sigma: &SigmaSpec, rep: u32) -> (FieldSolution, FieldSolution) {
        let g = GridSpec::covering(Interval::new(0.0, 0.5), 0.125, 1.0 / 32.0, 6.0).unwrap();
        let noise = sample_noise(&g, derive_seed(21, 0, rep)).unwrap();
        (solve_nonlinear(&g, &noise, sigma).unwrap(), solve_linear(&g, &noise).unwrap())
    }

    #[test]
    fn rectangle_eta_and_alignment() {
        let r = Rectangle::new(1.0 / 16.0, 0.0, 1.0 / 256.0, 1.0 / 16.0).unwrap();
        assert_eq!(r.eta(), 0.25);
        assert!(Rectangle::new(0.0, 0.0, 0.0, 0.5).is_err());
        let g = GridSpec::covering(Interval::new(0.0, 0.5), 0.125, 1.0 / 32.0, 6.0).unwrap();
        assert!(matches!(r.nodes(&g), Err(Error::Config(_))));
        let wide = Rectangle::new(1.0 / 16.0, 0.0, 1.0 / 32.0, 0.25).unwrap();
        let b = wide.nodes(&g).unwrap();
        assert_eq!((b.n1 - b.n0, b.j1 - b.j0), (64, 8));
    }

    #[test]
    fn constant_sigma_has_zero_residual() {
        let sigma = SigmaSpec::constant(1.0).unwrap();
        let (u, v) = pair(&sigma, 0);
        let rect = Rectangle::new(1.0 / 16.0, 0.0, 1.0 / 32.0, 0.25).unwrap();
        assert_eq!(coupling_residual_sup(&u, &v, &sigma, &rect).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_rectangle_is_zero() {
        let sigma = SigmaSpec::default_sine();
        let (u, v) = pair(&sigma, 1);
        let rect = Rectangle::point(1.0 / 16.0, 0.25);
        assert_eq!(coupling_residual_sup(&u, &v, &sigma, &rect).unwrap(), 0.0);
    }

    #[test]
    fn mismatched_seeds_rejected() {
        let sigma = SigmaSpec::default_sine();
        let (u, _) = pair(&sigma, 2);
        let (_, v) = pair(&sigma, 3);
        let rect = Rectangle::new(1.0 / 16.0, 0.0, 1.0 / 32.0, 0.25).unwrap();
        assert!(matches!(coupling_residual_sup(&u, &v, &sigma, &rect), Err(Error::Coupling(_))));
    }

    #[test]
    fn directional_checks_target() {
        let sigma = SigmaSpec::default_sine();
        let (u, v) = pair(&sigma, 4);
        let a = (1.0 / 16.0, 0.0);
        let bad = directional_residual(&u, &v, &sigma, a, (0.125, 0.25), Direction::Temporal);
        assert!(matches!(bad, Err(Error::Usage(_))));
        let bad = directional_residual(&u, &v, &sigma, a, (0.125, 0.25), Direction::Spatial);
        assert!(matches!(bad, Err(Error::Usage(_))));
        assert!(directional_residual(&u, &v, &sigma, a, (0.125, 0.0), Direction::Temporal).unwrap() > 0.0);
        assert_eq!(directional_residual(&u, &v, &sigma, a, a, Direction::Spatial).unwrap(), 0.0);
    }

    #[test]
    fn constant_sampler_moment() {
        let m = estimate_moment(|_| Ok(3.0), 2.0, 40, 100, 0).unwrap();
        assert_eq!((m.value, m.ci_lo, m.ci_hi), (3.0, 3.0, 3.0));
        assert!(matches!(estimate_moment(|_| Ok(1.0), 2.0, 10, 10, 0), Err(Error::Insufficient(_))));
        assert!(estimate_moment(|_| Err(Error::Range("boom".into())), 2.0, 40, 10, 0).is_err());
    }

    #[test]
    fn exact_power_law_fit() {
        let pts: Vec<(f64, f64)> = [0.5, 0.25, 0.125, 0.0625].iter().map(|&s: &f64| (s, s.powf(1.5))).collect();
        let f = fit_exponent(&pts).unwrap();
        assert!((f.slope - 1.5).abs() < 1e-12 && (f.r2 - 1.0).abs() < 1e-12);
        let flat: Vec<(f64, f64)> = [1.0, 2.0, 4.0].iter().map(|&s| (s, 7.0)).collect();
        assert!(fit_exponent(&flat).unwrap().slope.abs() < 1e-12);
        assert!(matches!(fit_exponent(&[(1.0, 1.0), (2.0, 0.0), (3.0, 1.0)]), Err(Error::Domain(_))));
        assert!(fit_exponent(&[(1.0, 1.0), (2.0, 1.0)]).is_err());
    }
}
