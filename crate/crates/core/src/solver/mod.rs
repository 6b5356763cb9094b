//! Explicit finite-difference solvers for the linear and nonlinear heat
//! equations driven by a shared noise field, and heat-kernel utilities.

mod ladder;

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{GridSpec, NoiseField, NoiseStream, Seed};

pub use ladder::{Ladder, LadderSpec, LevelRow, LevelView};

/// The three diffusion-coefficient families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SigmaKind {
    Constant { c: f64 },
    /// `a + b·sin(ω z)`.
    Sine { a: f64, b: f64, omega: f64 },
    /// Piecewise linear through `(knots[i], values[i])`, constant outside.
    /// Only Lipschitz, so results built on it do not carry the smoothness
    /// hypothesis of the hitting theory.
    Tabulated { knots: Vec<f64>, values: Vec<f64> },
}

/// Validated diffusion coefficient with its derived bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SigmaKind", into = "SigmaKind")]
pub struct SigmaSpec {
    pub kind: SigmaKind,
    pub sigma_min: f64,
    /// `Σ`: bounds σ and, for the smooth family, its first three derivatives.
    pub sigma_max: f64,
    pub lipschitz: f64,
}

impl TryFrom<SigmaKind> for SigmaSpec {
    type Error = Error;

    fn try_from(kind: SigmaKind) -> Result<Self> {
        let (sigma_min, sigma_max, lipschitz) = match &kind {
            SigmaKind::Constant { c } => (*c, *c, 0.0),
            SigmaKind::Sine { a, b, omega } => {
                if !omega.is_finite() || *omega < 0.0 {
                    return Err(Error::Config(format!("omega = {omega} must be finite and >= 0")));
                }
                let big = a + b.abs();
                let deriv = (1..=3).map(|k| b.abs() * omega.powi(k)).fold(0.0, f64::max);
                if deriv > big {
                    return Err(Error::Config(format!(
                        "derivatives of sigma up to order 3 reach {deriv}, above the bound {big}"
                    )));
                }
                (a - b.abs(), big, b.abs() * omega)
            }
            SigmaKind::Tabulated { knots, values } => {
                if knots.len() < 2 || knots.len() != values.len() {
                    return Err(Error::Config("tabulated sigma needs >= 2 matching knots and values".into()));
                }
                if knots.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(Error::Config("tabulated sigma knots must increase strictly".into()));
                }
                let lip = knots
                    .windows(2)
                    .zip(values.windows(2))
                    .map(|(k, v)| ((v[1] - v[0]) / (k[1] - k[0])).abs())
                    .fold(0.0, f64::max);
                let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (lo, hi, lip)
            }
        };
        if !(sigma_min > 0.0) || !sigma_max.is_finite() {
            return Err(Error::Config(format!("sigma must be bounded below by a positive constant (inf = {sigma_min})")));
        }
        Ok(Self { kind, sigma_min, sigma_max, lipschitz })
    }
}

impl From<SigmaSpec> for SigmaKind {
    fn from(s: SigmaSpec) -> Self {
        s.kind
    }
}

impl SigmaSpec {
    pub fn constant(c: f64) -> Result<Self> {
        SigmaKind::Constant { c }.try_into()
    }

    pub fn sine(a: f64, b: f64, omega: f64) -> Result<Self> {
        SigmaKind::Sine { a, b, omega }.try_into()
    }

    pub fn tabulated(knots: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        SigmaKind::Tabulated { knots, values }.try_into()
    }

    /// `1 + 0.4 sin z`, the default nonlinear coefficient.
    pub fn default_sine() -> Self {
        Self::sine(1.0, 0.4, 1.0).expect("valid default")
    }

    pub fn as_constant(&self) -> Option<f64> {
        match self.kind {
            SigmaKind::Constant { c } => Some(c),
            _ => None,
        }
    }

    #[inline]
    pub fn eval(&self, z: f64) -> f64 {
        match &self.kind {
            SigmaKind::Constant { c } => *c,
            SigmaKind::Sine { a, b, omega } => a + b * (omega * z).sin(),
            SigmaKind::Tabulated { knots, values } => {
                let k = knots.partition_point(|&p| p <= z);
                if k == 0 {
                    values[0]
                } else if k == knots.len() {
                    values[k - 1]
                } else {
                    let w = (z - knots[k - 1]) / (knots[k] - knots[k - 1]);
                    values[k - 1] + w * (values[k] - values[k - 1])
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolutionKind {
    Linear,
    Nonlinear,
}

/// One realized path on the full lattice: `values[[n, j]]` at `(t_n, x_j)`.
#[derive(Debug, Clone)]
pub struct FieldSolution {
    pub values: Array2<f64>,
    pub grid: GridSpec,
    pub kind: SolutionKind,
    pub sigma: Option<SigmaSpec>,
    pub seed: Seed,
}

/// `(2πt)^{-1/2} exp(-x²/(2t))`.
pub fn heat_kernel(t: f64, x: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::Domain(format!("heat kernel needs t > 0, got {t}")));
    }
    Ok((-x * x / (2.0 * t)).exp() / (2.0 * PI * t).sqrt())
}

/// `∫₀ᵗ ∫ G(s, y)² dy ds = sqrt(t/π)`, the variance of the linear solution
/// on the whole line.
pub fn linear_variance(t: f64) -> f64 {
    (t / PI).sqrt()
}

/// Mesh ratios of the scheme: `r = dt/(2dx²)`, `s = sqrt(dt/dx)`.
#[derive(Debug, Clone, Copy)]
pub struct Scheme {
    pub r: f64,
    pub s: f64,
}

impl Scheme {
    pub fn new(grid: &GridSpec) -> Self {
        Self { r: grid.dt / (2.0 * grid.dx * grid.dx), s: (grid.dt / grid.dx).sqrt() }
    }

    /// Advances the interior nodes of `cur` into `next`; the end nodes are
    /// copied unchanged. `sigma = None` is the linear equation.
    #[inline]
    pub fn advance(&self, cur: &[f64], next: &mut [f64], xi: &[f64], sigma: Option<&SigmaSpec>) {
        let m = cur.len();
        debug_assert!(m >= 2 && next.len() == m && xi.len() >= m);
        let (r, s) = (self.r, self.s);
        next[0] = cur[0];
        next[m - 1] = cur[m - 1];
        match sigma {
            None => {
                for j in 1..m - 1 {
                    next[j] = cur[j] + r * ((cur[j + 1] - 2.0 * cur[j]) + cur[j - 1]) + s * xi[j];
                }
            }
            Some(sig) => match sig.as_constant() {
                Some(c) => {
                    for j in 1..m - 1 {
                        next[j] = cur[j] + r * ((cur[j + 1] - 2.0 * cur[j]) + cur[j - 1]) + c * (s * xi[j]);
                    }
                }
                None => {
                    for j in 1..m - 1 {
                        next[j] = cur[j]
                            + r * ((cur[j + 1] - 2.0 * cur[j]) + cur[j - 1])
                            + sig.eval(cur[j]) * (s * xi[j]);
                    }
                }
            },
        }
    }
}

fn check_noise(grid: &GridSpec, noise: &NoiseField) -> Result<()> {
    grid.validate()?;
    if noise.grid != *grid {
        return Err(Error::Config("noise field was sampled on a different grid".into()));
    }
    if noise.xi.dim() != (grid.n_steps(), grid.n_nodes()) {
        return Err(Error::Config("noise field shape does not match its grid".into()));
    }
    Ok(())
}

fn solve(grid: &GridSpec, noise: &NoiseField, sigma: Option<&SigmaSpec>) -> Result<Array2<f64>> {
    check_noise(grid, noise)?;
    let scheme = Scheme::new(grid);
    let (steps, nodes) = (grid.n_steps(), grid.n_nodes());
    let mut values = Array2::zeros((steps + 1, nodes));
    let mut cur = vec![0.0; nodes];
    let mut next = vec![0.0; nodes];
    for n in 0..steps {
        let xi = noise.xi.row(n);
        scheme.advance(&cur, &mut next, xi.as_slice().expect("standard layout"), sigma);
        std::mem::swap(&mut cur, &mut next);
        values.row_mut(n + 1).as_slice_mut().expect("standard layout").copy_from_slice(&cur);
    }
    Ok(values)
}

pub fn solve_linear(grid: &GridSpec, noise: &NoiseField) -> Result<FieldSolution> {
    Ok(FieldSolution {
        values: solve(grid, noise, None)?,
        grid: *grid,
        kind: SolutionKind::Linear,
        sigma: None,
        seed: noise.seed,
    })
}

pub fn solve_nonlinear(grid: &GridSpec, noise: &NoiseField, sigma: &SigmaSpec) -> Result<FieldSolution> {
    let sigma = SigmaSpec::try_from(sigma.kind.clone())?;
    Ok(FieldSolution {
        values: solve(grid, noise, Some(&sigma))?,
        grid: *grid,
        kind: SolutionKind::Nonlinear,
        sigma: Some(sigma),
        seed: noise.seed,
    })
}

/// Value stored at the grid node `(t, x)`; no interpolation.
pub fn field_value(sol: &FieldSolution, t: f64, x: f64) -> Result<f64> {
    let n = sol.grid.time_index(t)?;
    let j = sol.grid.space_index(x)?;
    Ok(sol.values[[n, j]])
}

#[derive(Serialize)]
struct DumpSidecar<'a> {
    grid: &'a GridSpec,
    seed: &'a Seed,
    kind: SolutionKind,
    sigma: &'a Option<SigmaSpec>,
    rows: usize,
    cols: usize,
    layout: &'static str,
}

impl FieldSolution {
    /// Writes `values` as little-endian f64 (row-major) to `path` and a JSON
    /// sidecar to `path.json`.
    pub fn dump(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for v in self.values.iter() {
            f.write_all(&v.to_le_bytes())?;
        }
        f.flush()?;
        let (rows, cols) = self.values.dim();
        let side = DumpSidecar {
            grid: &self.grid,
            seed: &self.seed,
            kind: self.kind,
            sigma: &self.sigma,
            rows,
            cols,
            layout: "row-major f64 little-endian, rows = time steps",
        };
        let mut name = path.as_os_str().to_owned();
        name.push(".json");
        std::fs::write(name, serde_json::to_vec_pretty(&side)?)?;
        Ok(())
    }
}

/// Streaming solve of `u` (and optionally `v`) on one noise stream, for
/// experiments whose lattice is too large to store.
#[derive(Debug, Clone)]
pub struct CoupledRun {
    grid: GridSpec,
    scheme: Scheme,
    stream: NoiseStream,
    sigma: Option<SigmaSpec>,
    n: usize,
    xi: Vec<f64>,
    u: Vec<f64>,
    v: Option<Vec<f64>>,
    scratch: Vec<f64>,
}

impl CoupledRun {
    /// `sigma = None` runs the linear equation only (in `u`); `with_linear`
    /// carries the linear solution `v` alongside a nonlinear `u`.
    pub fn new(grid: &GridSpec, seed: Seed, sigma: Option<SigmaSpec>, with_linear: bool) -> Result<Self> {
        grid.validate()?;
        let m = grid.n_nodes();
        Ok(Self {
            grid: *grid,
            scheme: Scheme::new(grid),
            stream: NoiseStream::new(grid, seed),
            sigma,
            n: 0,
            xi: vec![0.0; m],
            u: vec![0.0; m],
            v: with_linear.then(|| vec![0.0; m]),
            scratch: vec![0.0; m],
        })
    }

    /// Starts from given rows at `t_origin` of `grid` (end values stay frozen).
    pub fn from_state(
        grid: &GridSpec,
        seed: Seed,
        sigma: Option<SigmaSpec>,
        u: Vec<f64>,
        v: Option<Vec<f64>>,
    ) -> Result<Self> {
        let mut run = Self::new(grid, seed, sigma, v.is_some())?;
        if u.len() != run.u.len() || v.as_ref().is_some_and(|v| v.len() != run.u.len()) {
            return Err(Error::Config("initial rows do not match the grid".into()));
        }
        run.u = u;
        run.v = v;
        Ok(run)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn step_index(&self) -> usize {
        self.n
    }

    pub fn time(&self) -> f64 {
        self.grid.time(self.n)
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn v(&self) -> Option<&[f64]> {
        self.v.as_deref()
    }

    pub fn into_rows(self) -> (Vec<f64>, Option<Vec<f64>>) {
        (self.u, self.v)
    }

    pub fn step(&mut self) -> Result<()> {
        if self.n >= self.grid.n_steps() {
            return Err(Error::Range(format!("run already reached t = {}", self.grid.t_end())));
        }
        self.stream.fill_row(self.n, &mut self.xi);
        self.scheme.advance(&self.u, &mut self.scratch, &self.xi, self.sigma.as_ref());
        std::mem::swap(&mut self.u, &mut self.scratch);
        if let Some(v) = self.v.as_mut() {
            self.scheme.advance(v, &mut self.scratch, &self.xi, None);
            std::mem::swap(v, &mut self.scratch);
        }
        self.n += 1;
        Ok(())
    }

    pub fn advance(&mut self, steps: usize) -> Result<()> {
        for _ in 0..steps {
            self.step()?;
        }
        Ok(())
    }

    pub fn run_to(&mut self, t: f64) -> Result<()> {
        let target = self.grid.time_index(t)?;
        if target < self.n {
            return Err(Error::Range(format!("t = {t} is in the past of the run")));
        }
        self.advance(target - self.n)
    }
}
