//! Nested local refinement for dyadic rectangles that are too small for a
//! single global grid.
//!
//! Level `n` looks at `[t0_n, t0_n + 2^{-4n}] × [x0, x0 + 2^{-2n}]` with `k`
//! nodes per side, so `dx_n = 2^{-2n}/k` and every rectangle spans `2k²` time
//! steps. A coarse global solve at `dx_{n_min - 1}` runs up to
//! `t0_{n_min} − τ_{n_min}`; each stage then interpolates the previous
//! stage's state onto a local grid four times finer (`dx` quarters), holds
//! the end nodes at their interpolated values, and warms up for
//! `τ_n = 2^{-4(n-1)}` before its rectangle opens. The next anchor is
//! `t0_{n+1} = t0_n + τ_{n+1}`: the next stage branches off at `t0_n`.
//!
//! The local half-width `pad·sqrt(τ_n + 2^{-4n})` keeps the frozen ends out
//! of diffusive reach of the rectangle.

use crate::error::{Error, Result};
use crate::noise::{GridSpec, Interval, Seed};

use super::{CoupledRun, SigmaSpec};

#[derive(Debug, Clone)]
pub struct LadderSpec {
    /// `t0` of the first level.
    pub t_anchor: f64,
    pub x_anchor: f64,
    pub n_min: u32,
    pub n_max: u32,
    /// Nodes per rectangle side, a power of two.
    pub nodes_per_side: usize,
    pub pad: f64,
    /// `None` solves the linear equation only.
    pub sigma: Option<SigmaSpec>,
    pub with_linear: bool,
}

impl LadderSpec {
    pub fn new(sigma: Option<SigmaSpec>, with_linear: bool) -> Self {
        Self {
            t_anchor: 0.25,
            x_anchor: 0.0,
            n_min: 2,
            n_max: 5,
            nodes_per_side: 8,
            pad: 6.0,
            sigma,
            with_linear,
        }
    }
}

/// Geometry of one level's rectangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelView {
    pub n: u32,
    pub t0: f64,
    pub x0: f64,
    pub zeta1: f64,
    pub zeta2: f64,
    pub dt: f64,
    pub dx: f64,
    /// Time steps across the rectangle (`2k²`).
    pub steps: usize,
    /// Nodes across the rectangle (`k + 1`).
    pub nodes: usize,
}

/// Row `step` (0 = anchor time) of the solutions restricted to the rectangle.
#[derive(Debug, Clone, Copy)]
pub struct LevelRow<'a> {
    pub step: usize,
    pub u: &'a [f64],
    pub v: Option<&'a [f64]>,
}

#[derive(Debug, Clone)]
pub struct Ladder {
    spec: LadderSpec,
    base: GridSpec,
    stages: Vec<(LevelView, GridSpec, usize)>,
}

fn pow2(e: i32) -> f64 {
    2f64.powi(e)
}

impl Ladder {
    pub fn new(spec: LadderSpec) -> Result<Self> {
        let k = spec.nodes_per_side;
        if k < 2 || !k.is_power_of_two() {
            return Err(Error::Config(format!("nodes per side {k} must be a power of two >= 2")));
        }
        if spec.n_min < 1 || spec.n_max < spec.n_min || spec.n_max > 12 {
            return Err(Error::Config(format!("level range {}..={} unsupported", spec.n_min, spec.n_max)));
        }
        let kf = k as f64;
        let dx_of = |n: u32| pow2(-2 * n as i32) / kf;
        let zeta1 = |n: u32| pow2(-4 * n as i32);
        let t_base = spec.t_anchor - zeta1(spec.n_min - 1);
        if !(t_base > 0.0) {
            return Err(Error::Config(format!(
                "anchor time {} leaves no room for the warm-up {}",
                spec.t_anchor,
                zeta1(spec.n_min - 1)
            )));
        }
        let window = Interval::new(spec.x_anchor, spec.x_anchor + pow2(-2 * spec.n_min as i32));
        let base = GridSpec::covering(window, t_base, dx_of(spec.n_min - 1), spec.pad)?;
        base.space_index(spec.x_anchor)?;

        let mut stages = Vec::new();
        let mut t0 = spec.t_anchor;
        let mut prev_extent = (base.x_lo, base.x_hi);
        for n in spec.n_min..=spec.n_max {
            let (z1, z2, dx) = (zeta1(n), pow2(-2 * n as i32), dx_of(n));
            let tau = zeta1(n - 1);
            let dx_prev = dx_of(n - 1);
            let half = spec.pad * (tau + z1).sqrt();
            let x_lo = spec.x_anchor - dx_prev * (half / dx_prev).ceil();
            let x_hi = spec.x_anchor + z2 + dx_prev * (half / dx_prev).ceil();
            if x_lo < prev_extent.0 || x_hi > prev_extent.1 {
                return Err(Error::Config(format!("level {n} local window leaves the parent grid")));
            }
            let grid = GridSpec::new(tau + z1, 0.5 * dx * dx, dx, x_lo, x_hi, spec.pad)?.with_origin(t0 - tau);
            let j0 = grid.space_index(spec.x_anchor)?;
            let view = LevelView {
                n,
                t0,
                x0: spec.x_anchor,
                zeta1: z1,
                zeta2: z2,
                dt: grid.dt,
                dx,
                steps: grid.time_steps(z1)?,
                nodes: k + 1,
            };
            stages.push((view, grid, j0));
            prev_extent = (x_lo, x_hi);
            t0 += zeta1(n);
        }
        Ok(Self { spec, base, stages })
    }

    pub fn levels(&self) -> impl Iterator<Item = &LevelView> {
        self.stages.iter().map(|(v, _, _)| v)
    }

    pub fn base_grid(&self) -> &GridSpec {
        &self.base
    }

    pub fn stage_grid(&self, n: u32) -> Option<&GridSpec> {
        self.stages.iter().find(|(v, _, _)| v.n == n).map(|(_, g, _)| g)
    }

    /// Cell-steps per replication, for budgeting.
    pub fn cost(&self) -> usize {
        let mut c = self.base.n_steps() * self.base.n_nodes();
        for (_, g, _) in &self.stages {
            c += g.n_steps() * g.n_nodes();
        }
        c * if self.spec.with_linear && self.spec.sigma.is_some() { 2 } else { 1 }
    }

    /// Runs one replication and hands every rectangle row to `observe`.
    pub fn run<F>(&self, seed: Seed, mut observe: F) -> Result<()>
    where
        F: FnMut(&LevelView, LevelRow<'_>) -> Result<()>,
    {
        let sigma = self.spec.sigma.clone();
        let with_v = self.spec.with_linear && sigma.is_some();
        let mut run = CoupledRun::new(&self.base, seed, sigma.clone(), with_v)?;
        run.advance(self.base.n_steps())?;
        let mut parent_grid = self.base;
        let (mut pu, mut pv) = run.into_rows();
        for (view, grid, j0) in &self.stages {
            let u0 = interpolate(&parent_grid, &pu, grid);
            let v0 = pv.as_ref().map(|v| interpolate(&parent_grid, v, grid));
            let mut run = CoupledRun::from_state(grid, seed, sigma.clone(), u0, v0)?;
            run.advance(grid.n_steps() - view.steps)?;
            let branch = (run.u().to_vec(), run.v().map(<[f64]>::to_vec));
            let cols = *j0..*j0 + view.nodes;
            for step in 0..=view.steps {
                if step > 0 {
                    run.step()?;
                }
                let row = LevelRow {
                    step,
                    u: &run.u()[cols.clone()],
                    v: run.v().map(|v| &v[cols.clone()]),
                };
                observe(view, row)?;
            }
            parent_grid = *grid;
            (pu, pv) = branch;
        }
        Ok(())
    }
}

/// Linear interpolation of `row` (on `from`) at the nodes of `to`.
fn interpolate(from: &GridSpec, row: &[f64], to: &GridSpec) -> Vec<f64> {
    let last = row.len() - 1;
    (0..to.n_nodes())
        .map(|j| {
            let pos = (to.space(j) - from.x_lo) / from.dx;
            let i = (pos.floor() as usize).min(last - 1);
            let w = pos - i as f64;
            row[i] + w * (row[i + 1] - row[i])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::derive_seed;

    #[test]
    fn geometry_is_dyadic() {
        let ladder = Ladder::new(LadderSpec::new(None, false)).unwrap();
        let views: Vec<_> = ladder.levels().copied().collect();
        assert_eq!(views.len(), 4);
        assert_eq!(views[0].t0, 0.25);
        assert_eq!(views[1].t0, 0.25 + 1.0 / 256.0);
        assert_eq!(ladder.base_grid().n_steps(), 384);
        for v in &views {
            assert_eq!(v.steps, 128);
            assert_eq!(v.nodes, 9);
            assert_eq!(v.dx * 8.0, v.zeta2);
        }
    }

    #[test]
    fn interpolation_is_exact_on_parent_nodes() {
        let from = GridSpec::new(1.0 / 512.0, 1.0 / 2048.0, 1.0 / 32.0, -1.0, 1.0, 6.0).unwrap();
        let to = GridSpec::new(1.0 / 512.0, 1.0 / 32768.0, 1.0 / 128.0, -0.5, 0.5, 6.0).unwrap();
        let row: Vec<f64> = (0..from.n_nodes()).map(|j| (j as f64).sin()).collect();
        let out = interpolate(&from, &row, &to);
        for (j, &y) in out.iter().enumerate() {
            if j % 4 == 0 {
                assert_eq!(y, row[16 + j / 4]);
            }
        }
    }

    #[test]
    fn rows_start_at_anchor_and_are_deterministic() {
        let ladder = Ladder::new(LadderSpec::new(Some(SigmaSpec::default_sine()), true)).unwrap();
        let mut a = Vec::new();
        ladder
            .run(derive_seed(4, 0, 0), |view, row| {
                a.push((view.n, row.step, row.u[0], row.v.unwrap()[0]));
                Ok(())
            })
            .unwrap();
        assert_eq!(a.len(), 4 * 129);
        let mut b = Vec::new();
        ladder
            .run(derive_seed(4, 0, 0), |view, row| {
                b.push((view.n, row.step, row.u[0], row.v.unwrap()[0]));
                Ok(())
            })
            .unwrap();
        assert_eq!(a, b);
    }
}
