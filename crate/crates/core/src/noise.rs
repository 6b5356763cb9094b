//! Discretized space-time white noise on a regular (t, x) lattice.
//!
//! Every normal draw is a pure function of `(master, component, replication,
//! grid, n, j)`: the noise of any sub-rectangle can be regenerated without
//! storing the field, and concurrent replications share no state.
//!
//! Mixing function (documented so streams can be reproduced elsewhere):
//!
//! * stream key: `k_a = mix64(master ^ C_MASTER ^ mix64(grid_fingerprint))`,
//!   `k_b = mix64(lane ^ C_LANE)` with `lane = component << 32 | replication`;
//! * uniform word number `k` of cell `(n, j)`:
//!   `mix64(mix64((n << 28 | j << 4 | k) + k_a) ^ k_b)`;
//! * the normal draw is the Marsaglia–Tsang ziggurat of `rand_distr`
//!   (`StandardNormal`) fed by those words, so one counter always yields the
//!   same draw.
//!
//! `mix64` is the SplitMix64 finalizer.

use ndarray::Array2;
use rand_core::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cells a materialized field may hold (2^27 doubles = 1 GiB).
pub const DEFAULT_MEMORY_BUDGET: usize = 1 << 27;

const C_MASTER: u64 = 0xD6E8_FEB8_6659_FD93;
const C_LANE: u64 = 0xA076_1D64_78BD_642F;
const MAX_NODES: usize = 1 << 24;
const MAX_STEPS: usize = 1 << 36;
const ALIGN_TOL: f64 = 1e-7;

#[inline(always)]
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn len(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn is_empty(&self) -> bool {
        !(self.hi > self.lo)
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

/// Space-time lattice `t_n = t_origin + n·dt`, `x_j = x_lo + j·dx`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Time of row 0. Zero for solves started from the initial data.
    #[serde(default)]
    pub t_origin: f64,
    /// Duration covered by the lattice.
    pub horizon: f64,
    pub dt: f64,
    pub dx: f64,
    pub x_lo: f64,
    pub x_hi: f64,
    /// Truncation margin in multiples of `sqrt(horizon)`.
    pub pad: f64,
}

impl GridSpec {
    pub fn new(horizon: f64, dt: f64, dx: f64, x_lo: f64, x_hi: f64, pad: f64) -> Result<Self> {
        let grid = Self { t_origin: 0.0, horizon, dt, dx, x_lo, x_hi, pad };
        grid.validate()?;
        Ok(grid)
    }

    /// Grid with `dt = dx²/2` whose extent clears `window` by `pad·sqrt(horizon)`
    /// on both sides.
    pub fn covering(window: Interval, horizon: f64, dx: f64, pad: f64) -> Result<Self> {
        if window.is_empty() {
            return Err(Error::Config(format!(
                "observation window [{}, {}] is empty",
                window.lo, window.hi
            )));
        }
        let margin = pad * horizon.max(0.0).sqrt();
        let x_lo = dx * ((window.lo - margin) / dx).floor() - dx;
        let x_hi = dx * ((window.hi + margin) / dx).ceil() + dx;
        let grid = Self::new(horizon, 0.5 * dx * dx, dx, x_lo, x_hi, pad)?;
        grid.check_window(window)?;
        Ok(grid)
    }

    pub fn with_origin(mut self, t_origin: f64) -> Self {
        self.t_origin = t_origin;
        self
    }

    pub fn stability_ratio(&self) -> f64 {
        self.dt / (self.dx * self.dx)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.t_origin, self.horizon, self.dt, self.dx, self.x_lo, self.x_hi, self.pad];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("grid parameters must be finite".into()));
        }
        if !(self.dt > 0.0) || !(self.dx > 0.0) {
            return Err(Error::Config(format!("dt = {} and dx = {} must be positive", self.dt, self.dx)));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::Config(format!("horizon {} must be positive", self.horizon)));
        }
        if !(self.x_hi > self.x_lo) {
            return Err(Error::Config(format!("empty spatial extent [{}, {}]", self.x_lo, self.x_hi)));
        }
        if self.stability_ratio() > 1.0 + 1e-12 {
            return Err(Error::Config(format!(
                "explicit scheme unstable: dt/dx^2 = {} > 1",
                self.stability_ratio()
            )));
        }
        if self.pad < 0.0 {
            return Err(Error::Config(format!("pad {} must be non-negative", self.pad)));
        }
        let steps = self.horizon / self.dt;
        if (steps - steps.round()).abs() > ALIGN_TOL * steps.max(1.0) || steps.round() < 1.0 {
            return Err(Error::Config(format!(
                "horizon {} is not a positive multiple of dt {}",
                self.horizon, self.dt
            )));
        }
        let cells = (self.x_hi - self.x_lo) / self.dx;
        if (cells - cells.round()).abs() > ALIGN_TOL * cells.max(1.0) || cells.round() < 2.0 {
            return Err(Error::Config(format!(
                "extent [{}, {}] is not a multiple (>= 2) of dx {}",
                self.x_lo, self.x_hi, self.dx
            )));
        }
        if self.n_nodes() > MAX_NODES || self.n_steps() > MAX_STEPS {
            return Err(Error::Config("grid exceeds the noise counter layout".into()));
        }
        Ok(())
    }

    /// Checks the truncation margin `x_lo < J.lo − pad·√T`, `x_hi > J.hi + pad·√T`.
    pub fn check_window(&self, window: Interval) -> Result<()> {
        let margin = self.pad * (self.t_origin + self.horizon).sqrt().max(self.horizon.sqrt());
        if !(self.x_lo < window.lo - margin) || !(self.x_hi > window.hi + margin) {
            return Err(Error::Config(format!(
                "extent [{}, {}] does not clear window [{}, {}] by pad margin {}",
                self.x_lo, self.x_hi, window.lo, window.hi, margin
            )));
        }
        Ok(())
    }

    pub fn fits_budget(&self, budget: usize) -> bool {
        (self.n_steps() + 1).saturating_mul(self.n_nodes()) <= budget
    }

    /// Number of time steps; rows `0..=n_steps` exist.
    pub fn n_steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn n_nodes(&self) -> usize {
        ((self.x_hi - self.x_lo) / self.dx).round() as usize + 1
    }

    pub fn t_end(&self) -> f64 {
        self.t_origin + self.horizon
    }

    pub fn time(&self, n: usize) -> f64 {
        self.t_origin + n as f64 * self.dt
    }

    pub fn space(&self, j: usize) -> f64 {
        self.x_lo + j as f64 * self.dx
    }

    pub fn time_index(&self, t: f64) -> Result<usize> {
        let k = (t - self.t_origin) / self.dt;
        let r = k.round();
        if (k - r).abs() > ALIGN_TOL || r < 0.0 || r as usize > self.n_steps() {
            return Err(Error::Precision(format!("t = {t} is not a time node of the grid")));
        }
        Ok(r as usize)
    }

    pub fn space_index(&self, x: f64) -> Result<usize> {
        let k = (x - self.x_lo) / self.dx;
        let r = k.round();
        if (k - r).abs() > ALIGN_TOL || r < 0.0 || r as usize >= self.n_nodes() {
            return Err(Error::Precision(format!("x = {x} is not a space node of the grid")));
        }
        Ok(r as usize)
    }

    /// Number of whole `dx` (or `dt`) steps in `len`, or an error when `len`
    /// is not a multiple.
    pub fn space_steps(&self, len: f64) -> Result<usize> {
        whole_steps(len, self.dx, "width")
    }

    pub fn time_steps(&self, len: f64) -> Result<usize> {
        whole_steps(len, self.dt, "duration")
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = 0x243F_6A88_85A3_08D3u64;
        for v in [self.t_origin, self.dt, self.dx, self.x_lo, self.x_hi] {
            h = mix64(h ^ v.to_bits());
        }
        h
    }
}

fn whole_steps(len: f64, step: f64, what: &str) -> Result<usize> {
    let k = len / step;
    let r = k.round();
    if (k - r).abs() > ALIGN_TOL || r < 0.0 {
        return Err(Error::Precision(format!("{what} {len} is not a multiple of {step}")));
    }
    Ok(r as usize)
}

/// Identifies one independent noise stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Seed {
    pub master: u64,
    pub component: u32,
    pub replication: u32,
}

/// Pre-mixing stream state. The map `Seed -> StreamState` is injective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamState {
    pub master: u64,
    pub lane: u64,
}

pub fn derive_seed(master: u64, component: u32, replication: u32) -> Seed {
    Seed { master, component, replication }
}

impl Seed {
    pub fn stream_state(&self) -> StreamState {
        StreamState {
            master: self.master,
            lane: (u64::from(self.component) << 32) | u64::from(self.replication),
        }
    }

    pub fn with_replication(self, replication: u32) -> Self {
        Self { replication, ..self }
    }

    pub fn with_component(self, component: u32) -> Self {
        Self { component, ..self }
    }
}

/// On-the-fly generator for the normal draws `xi[n, j]` of one (grid, seed).
#[derive(Debug, Clone, Copy)]
pub struct NoiseStream {
    key_a: u64,
    key_b: u64,
    nodes: usize,
}

struct CellWords {
    key_a: u64,
    key_b: u64,
    base: u64,
    word: u64,
}

impl RngCore for CellWords {
    #[inline(always)]
    fn next_u64(&mut self) -> u64 {
        let w = self.word;
        self.word += 1;
        // Words past 15 leave the cell's counter block; fold them into a
        // separate counter space (high bit set) so they never alias.
        let ctr = if w < 16 { self.base | w } else { (1 << 63) ^ mix64(self.base ^ w) };
        mix64(mix64(ctr.wrapping_add(self.key_a)) ^ self.key_b)
    }

    #[inline(always)]
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let w = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&w[..chunk.len()]);
        }
    }
}

impl NoiseStream {
    pub fn new(grid: &GridSpec, seed: Seed) -> Self {
        let state = seed.stream_state();
        Self {
            key_a: mix64(state.master ^ C_MASTER ^ mix64(grid.fingerprint())),
            key_b: mix64(state.lane ^ C_LANE),
            nodes: grid.n_nodes(),
        }
    }

    /// Standard normal draw of cell `(n, j)`.
    #[inline(always)]
    pub fn draw(&self, n: usize, j: usize) -> f64 {
        let mut words = CellWords {
            key_a: self.key_a,
            key_b: self.key_b,
            base: ((n as u64) << 28) | ((j as u64) << 4),
            word: 0,
        };
        StandardNormal.sample(&mut words)
    }

    /// Fills `row[j] = xi[n, j]` for every node.
    pub fn fill_row(&self, n: usize, row: &mut [f64]) {
        debug_assert_eq!(row.len(), self.nodes);
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = self.draw(n, j);
        }
    }
}

/// Materialized noise: `xi[[n, j]]` for `n < n_steps`, `j < n_nodes`.
///
/// The white-noise integral over cell `[t_n, t_{n+1}] × [x_j, x_{j+1}]` is
/// `xi[[n, j]] · sqrt(dt·dx)`.
#[derive(Debug, Clone)]
pub struct NoiseField {
    pub xi: Array2<f64>,
    pub grid: GridSpec,
    pub seed: Seed,
}

impl NoiseField {
    pub fn cell_integral(&self, n: usize, j: usize) -> f64 {
        self.xi[[n, j]] * (self.grid.dt * self.grid.dx).sqrt()
    }

    /// Zero noise on `grid`; handy for deterministic checks.
    pub fn zeros(grid: GridSpec, seed: Seed) -> Self {
        Self { xi: Array2::zeros((grid.n_steps(), grid.n_nodes())), grid, seed }
    }
}

pub fn sample_noise(grid: &GridSpec, seed: Seed) -> Result<NoiseField> {
    sample_noise_with_budget(grid, seed, DEFAULT_MEMORY_BUDGET)
}

pub fn sample_noise_with_budget(grid: &GridSpec, seed: Seed, budget: usize) -> Result<NoiseField> {
    grid.validate()?;
    if !grid.fits_budget(budget) {
        return Err(Error::Resource(format!(
            "{} x {} lattice exceeds the memory budget of {budget} cells",
            grid.n_steps() + 1,
            grid.n_nodes()
        )));
    }
    let stream = NoiseStream::new(grid, seed);
    let mut xi = Array2::zeros((grid.n_steps(), grid.n_nodes()));
    for (n, mut row) in xi.outer_iter_mut().enumerate() {
        let row = row.as_slice_mut().expect("standard layout");
        stream.fill_row(n, row);
    }
    Ok(NoiseField { xi, grid: *grid, seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> GridSpec {
        GridSpec::new(0.25, 1.0 / 512.0, 1.0 / 16.0, -2.0, 2.0, 6.0).unwrap()
    }

    #[test]
    fn derive_seed_is_injective_on_examples() {
        let a = derive_seed(7, 0, 0).stream_state();
        assert_eq!(a, derive_seed(7, 0, 0).stream_state());
        assert_ne!(a, derive_seed(7, 0, 1).stream_state());
        assert_ne!(derive_seed(7, 1, 0).stream_state(), derive_seed(8, 1, 0).stream_state());
        assert_ne!(derive_seed(7, 1, 0).stream_state(), derive_seed(7, 0, 1).stream_state());
    }

    #[test]
    fn sampling_is_deterministic() {
        let g = grid();
        let s = derive_seed(11, 0, 3);
        let a = sample_noise(&g, s).unwrap();
        let b = sample_noise(&g, s).unwrap();
        assert!(a.xi.iter().zip(b.xi.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn stream_regenerates_any_cell() {
        let g = grid();
        let s = derive_seed(5, 2, 9);
        let field = sample_noise(&g, s).unwrap();
        let stream = NoiseStream::new(&g, s);
        for &(n, j) in &[(0, 0), (17, 33), (127, 64)] {
            assert_eq!(field.xi[[n, j]].to_bits(), stream.draw(n, j).to_bits());
        }
    }

    #[test]
    fn unstable_grid_rejected() {
        let err = GridSpec::new(0.25, 1.0 / 64.0, 1.0 / 16.0, -2.0, 2.0, 6.0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(GridSpec::new(0.25, 1.0 / 512.0, 1.0 / 16.0, 1.0, 1.0, 6.0).is_err());
    }

    #[test]
    fn covering_clears_window() {
        let j = Interval::new(0.0, 0.25);
        let g = GridSpec::covering(j, 0.5, 1.0 / 32.0, 6.0).unwrap();
        assert!(g.x_lo < -6.0 * 0.5f64.sqrt());
        assert!(g.x_hi > 0.25 + 6.0 * 0.5f64.sqrt());
        assert_eq!(g.stability_ratio(), 0.5);
        assert!(g.check_window(Interval::new(-1.0, 5.0)).is_err());
    }

    #[test]
    fn budget_is_enforced() {
        let g = grid();
        let err = sample_noise_with_budget(&g, derive_seed(1, 0, 0), 100).unwrap_err();
        assert!(matches!(err, Error::Resource(_)));
    }

    #[test]
    fn off_grid_indices_rejected() {
        let g = grid();
        assert_eq!(g.space_index(-2.0).unwrap(), 0);
        assert_eq!(g.time_index(0.25).unwrap(), 128);
        assert!(g.space_index(0.01).is_err());
        assert!(g.time_index(0.001).is_err());
    }
}
