//! Garsia–Rodemich–Rumsey type functionals of the linear solution and the
//! threshold implication `Z ≤ R ⟹ sup |v − v(t0, x0)| ≤ a`.
//!
//! With `Δ` the relevant increment of `v` on `[t0, r] × [x0, z]`:
//!
//! * `Y1 = ∬ Δ_t^{2p0} / |t−s|^{γ0/2}` along `x = x0`,
//! * `Y2 = ∬ Δ_x^{2p0} / |x−y|^{γ0−2}` along `t = t0`,
//! * `Y3 = ∬∬ Δ_{t,x}^{2p0} / (|t−s|^{1+2p0γ1} |x−y|^{1+2p0γ2})` for the
//!   rectangular increment `v(t,x)+v(s,y)−v(t,y)−v(s,x)`.
//!
//! Integrals are trapezoidal sums over grid nodes with the diagonal
//! (`s = t`, resp. `x = y`) left out.

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coupling::{NodeBox, MIN_STEPS_PER_SIDE};
use crate::error::{Error, Result};
use crate::hitting::replication;
use crate::noise::derive_seed;
use crate::solver::{FieldSolution, Ladder, LadderSpec};

const TOL: f64 = 1e-12;

/// Value used for `c_cal` when no training path constrains it.
pub const UNCONSTRAINED_C_CAL: f64 = 1.0;

/// Calibration shrink applied to the constant (equivalently to `R`).
pub const SAFETY: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams", into = "RawParams")]
pub struct SeminormParams {
    pub p0: u32,
    pub gamma0: f64,
    pub theta: f64,
    pub theta1: f64,
    pub theta2: f64,
    pub gamma1: f64,
    pub gamma2: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RawParams {
    pub p0: u32,
    pub gamma0: f64,
    pub theta: f64,
    pub gamma1: f64,
    pub gamma2: f64,
}

impl TryFrom<RawParams> for SeminormParams {
    type Error = Error;

    fn try_from(r: RawParams) -> Result<Self> {
        SeminormParams::new(r.p0, r.gamma0, r.theta, r.gamma1, r.gamma2)
    }
}

impl From<SeminormParams> for RawParams {
    fn from(p: SeminormParams) -> Self {
        RawParams { p0: p.p0, gamma0: p.gamma0, theta: p.theta, gamma1: p.gamma1, gamma2: p.gamma2 }
    }
}

impl Default for SeminormParams {
    fn default() -> Self {
        Self::new(16, 5.0, 0.25, 0.04, 0.045).expect("default pack is admissible")
    }
}

impl SeminormParams {
    pub fn new(p0: u32, gamma0: f64, theta: f64, gamma1: f64, gamma2: f64) -> Result<Self> {
        let bad = |m: String| Err(Error::Config(m));
        if p0 % 2 != 0 || p0 == 0 {
            return bad(format!("p0 = {p0} must be a positive even integer"));
        }
        let p = f64::from(p0);
        if !(p > gamma0 && gamma0 > 4.0) {
            return bad(format!("need p0 > gamma0 > 4, got p0 = {p0}, gamma0 = {gamma0}"));
        }
        if !(theta > 0.0 && theta < 0.5) {
            return bad(format!("theta = {theta} must lie in (0, 1/2)"));
        }
        let (theta1, theta2) = (0.5 - theta, 2.0 * theta);
        let lo = 1.0 / (2.0 * p);
        if !(gamma1 > lo && gamma1 < theta1 / 2.0 - lo) {
            return bad(format!("gamma1 = {gamma1} outside ({lo}, {})", theta1 / 2.0 - lo));
        }
        if !(gamma2 > lo && gamma2 < theta2 / 2.0 - lo) {
            return bad(format!("gamma2 = {gamma2} outside ({lo}, {})", theta2 / 2.0 - lo));
        }
        let want = (gamma0 - 1.0) / (2.0 * p);
        if (2.0 * gamma1 + gamma2 - want).abs() > TOL {
            return bad(format!("2 gamma1 + gamma2 = {} must equal (gamma0 - 1)/(2 p0) = {want}", 2.0 * gamma1 + gamma2));
        }
        Ok(Self { p0, gamma0, theta, theta1, theta2, gamma1, gamma2 })
    }

    /// Predicted exponents of `E[Y1]` in `|r − t0|` and `E[Y2]` in `|z − x0|`.
    pub fn y1_exponent(&self) -> f64 {
        2.0 + (f64::from(self.p0) - self.gamma0) / 2.0
    }

    pub fn y2_exponent(&self) -> f64 {
        4.0 + f64::from(self.p0) - self.gamma0
    }

    /// Predicted marginal exponents of `E[Y3]` in `|r − t0|` and `|z − x0|`.
    pub fn y3_exponents(&self) -> (f64, f64) {
        let p = f64::from(self.p0);
        (1.0 + p * (self.theta1 - 2.0 * self.gamma1), 1.0 + p * (self.theta2 - 2.0 * self.gamma2))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub a: f64,
    pub zeta: f64,
    pub c_cal: f64,
    pub r_threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrrState {
    pub y1: f64,
    pub y2: f64,
    pub y3: f64,
    pub z: f64,
    pub threshold: Option<Threshold>,
}

impl GrrState {
    pub fn with_threshold(mut self, a: f64, zeta: f64, params: &SeminormParams, c_cal: f64) -> Result<Self> {
        let r_threshold = grr_threshold(a, zeta, params, c_cal)?;
        self.threshold = Some(Threshold { a, zeta, c_cal, r_threshold });
        Ok(self)
    }
}

fn trapezoid(m: usize, h: f64) -> Vec<f64> {
    let mut w = vec![h; m];
    if m > 0 {
        w[0] = 0.5 * h;
        w[m - 1] = 0.5 * h;
    }
    w
}

/// Functionals of the window `w[[t, x]]` (first row `t0`, first column `x0`).
pub fn functionals_on(w: ArrayView2<'_, f64>, dt: f64, dx: f64, params: &SeminormParams) -> GrrState {
    let (mt, mx) = w.dim();
    let q = 2 * params.p0 as i32;
    let wt = trapezoid(mt, dt);
    let wx = trapezoid(mx, dx);
    let k1 = params.gamma0 / 2.0;
    let k2 = params.gamma0 - 2.0;
    let k3t = 1.0 + 2.0 * f64::from(params.p0) * params.gamma1;
    let k3x = 1.0 + 2.0 * f64::from(params.p0) * params.gamma2;
    let tk1: Vec<f64> = (0..mt).map(|d| (d as f64 * dt).powf(-k1)).collect();
    let tk3: Vec<f64> = (0..mt).map(|d| (d as f64 * dt).powf(-k3t)).collect();
    let xk2: Vec<f64> = (0..mx).map(|d| (d as f64 * dx).powf(-k2)).collect();
    let xk3: Vec<f64> = (0..mx).map(|d| (d as f64 * dx).powf(-k3x)).collect();

    let col = w.column(0);
    let mut y1 = 0.0;
    for a in 0..mt {
        for b in a + 1..mt {
            y1 += wt[a] * wt[b] * (col[b] - col[a]).powi(q) * tk1[b - a];
        }
    }
    let row = w.row(0);
    let mut y2 = 0.0;
    for i in 0..mx {
        for k in i + 1..mx {
            y2 += wx[i] * wx[k] * (row[k] - row[i]).powi(q) * xk2[k - i];
        }
    }
    let mut y3 = 0.0;
    let mut diff = vec![0.0; mx];
    for a in 0..mt {
        let ra = w.index_axis(Axis(0), a);
        for b in a + 1..mt {
            let rb = w.index_axis(Axis(0), b);
            for ((d, &x), &y) in diff.iter_mut().zip(rb.iter()).zip(ra.iter()) {
                *d = x - y;
            }
            let mut inner = 0.0;
            for i in 0..mx {
                for k in i + 1..mx {
                    inner += wx[i] * wx[k] * (diff[k] - diff[i]).powi(q) * xk3[k - i];
                }
            }
            y3 += wt[a] * wt[b] * tk3[b - a] * inner;
        }
    }
    // Both orderings of each off-diagonal pair.
    let (y1, y2, y3) = (2.0 * y1, 2.0 * y2, 4.0 * y3);
    GrrState { y1, y2, y3, z: y1 + y2 + y3, threshold: None }
}

fn window(v: &FieldSolution, anchor: (f64, f64), r: f64, z: f64) -> Result<NodeBox> {
    let g = &v.grid;
    let (n0, j0) = (g.time_index(anchor.0)?, g.space_index(anchor.1)?);
    let (n1, j1) = (g.time_index(r)?, g.space_index(z)?);
    if n1 <= n0 || j1 <= j0 {
        return Err(Error::Domain(format!(
            "window [{}, {r}] x [{}, {z}] is degenerate",
            anchor.0, anchor.1
        )));
    }
    if n1 - n0 < MIN_STEPS_PER_SIDE || j1 - j0 < MIN_STEPS_PER_SIDE {
        return Err(Error::Config(format!(
            "window spans {} x {} steps; need >= {MIN_STEPS_PER_SIDE} per side",
            n1 - n0,
            j1 - j0
        )));
    }
    Ok(NodeBox { n0, n1, j0, j1 })
}

fn slice(v: &FieldSolution, b: NodeBox) -> ArrayView2<'_, f64> {
    v.values.slice(ndarray::s![b.n0..=b.n1, b.j0..=b.j1])
}

/// `Y1(r)`, `Y2(z)`, `Y3(r, z)` and `Z` on `[t0, r] × [x0, z]`.
pub fn grr_functionals(
    v: &FieldSolution,
    params: &SeminormParams,
    anchor: (f64, f64),
    r: f64,
    z: f64,
) -> Result<GrrState> {
    let b = window(v, anchor, r, z)?;
    Ok(functionals_on(slice(v, b), v.grid.dt, v.grid.dx, params))
}

/// `R = c_cal · a^{2p0} · ζ^{4−γ0}`.
pub fn grr_threshold(a: f64, zeta: f64, params: &SeminormParams, c_cal: f64) -> Result<f64> {
    if !(a > 0.0) || !(zeta > 0.0 && zeta <= 1.0) || !(c_cal > 0.0) {
        return Err(Error::Domain(format!("threshold needs a > 0, zeta in (0, 1], c > 0 (got {a}, {zeta}, {c_cal})")));
    }
    Ok(c_cal * a.powi(2 * params.p0 as i32) * zeta.powf(4.0 - params.gamma0))
}

/// `max |v − v(t0, x0)|` over the window.
pub fn window_sup(w: ArrayView2<'_, f64>) -> f64 {
    let v0 = w[[0, 0]];
    w.iter().fold(0.0f64, |m, &x| m.max((x - v0).abs()))
}

/// Whether `Z ≤ R ⟹ sup ≤ a` holds on this path.
pub fn check_grr_implication(state: &GrrState, v: &FieldSolution, anchor: (f64, f64), r: f64, z: f64) -> Result<bool> {
    let th = state
        .threshold
        .ok_or_else(|| Error::Usage("state carries no threshold; call with_threshold first".into()))?;
    let b = window(v, anchor, r, z)?;
    Ok(implication_holds(state.z, window_sup(slice(v, b)), &th))
}

pub fn implication_holds(z: f64, sup: f64, th: &Threshold) -> bool {
    z > th.r_threshold || sup <= th.a
}

/// Per-path summary used for calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub z: f64,
    pub sup: f64,
}

impl PathRecord {
    /// Largest `c` for which the implication holds on this path at every
    /// level `a > 0`: `Z / (sup^{2p0} ζ^{4−γ0})`, infinite for a flat path.
    pub fn kappa(&self, params: &SeminormParams, zeta: f64) -> f64 {
        if self.sup == 0.0 {
            return f64::INFINITY;
        }
        self.z / (self.sup.powi(2 * params.p0 as i32) * zeta.powf(4.0 - params.gamma0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub c_cal: f64,
    pub kappa_min: f64,
    pub n_paths: usize,
    /// No training path had a positive sup; `c_cal` is the fallback value.
    pub unconstrained: bool,
}

pub const MIN_TRAINING_PATHS: usize = 100;

/// Calibrates `c` so the implication holds on every training path for every
/// level `a`, then shrinks it by [`SAFETY`]. The result does not depend on
/// `a`; it is accepted for the record only.
pub fn calibrate_grr_constant(
    records: &[PathRecord],
    params: &SeminormParams,
    a: f64,
    zeta: f64,
) -> Result<Calibration> {
    if records.is_empty() {
        return Err(Error::Insufficient("empty training set".into()));
    }
    if records.len() < MIN_TRAINING_PATHS {
        return Err(Error::Insufficient(format!(
            "{} training paths; calibration needs >= {MIN_TRAINING_PATHS}",
            records.len()
        )));
    }
    grr_threshold(a, zeta, params, 1.0)?;
    let kappa_min = records.iter().map(|r| r.kappa(params, zeta)).fold(f64::INFINITY, f64::min);
    let unconstrained = !kappa_min.is_finite();
    let c_cal = if unconstrained { UNCONSTRAINED_C_CAL } else { SAFETY * kappa_min };
    if !(c_cal > 0.0) {
        return Err(Error::Domain("a training path has Z = 0 with a positive sup".into()));
    }
    Ok(Calibration { c_cal, kappa_min, n_paths: records.len(), unconstrained })
}

/// Computes the calibration record of one path.
pub fn path_record(v: &FieldSolution, params: &SeminormParams, anchor: (f64, f64), r: f64, z: f64) -> Result<PathRecord> {
    let b = window(v, anchor, r, z)?;
    let w = slice(v, b);
    let s = functionals_on(w, v.grid.dt, v.grid.dx, params);
    Ok(PathRecord { z: s.z, sup: window_sup(w) })
}

/// `(Y1, Y2)` of the linear solution on every ladder rectangle, as
/// `[rep][level]`: `Y1` along the anchor column over the rectangle's
/// duration, `Y2` along the anchor row over its width.
pub fn ladder_functionals(
    spec: &LadderSpec,
    params: &SeminormParams,
    n_reps: usize,
    master: u64,
) -> Result<Vec<Vec<(f64, f64)>>> {
    let ladder = Ladder::new(LadderSpec { sigma: None, with_linear: false, ..spec.clone() })?;
    let views: Vec<_> = ladder.levels().copied().collect();
    (0..n_reps)
        .into_par_iter()
        .map(|rep| {
            let mut col: Vec<Vec<f64>> = views.iter().map(|v| Vec::with_capacity(v.steps + 1)).collect();
            let mut row0: Vec<Vec<f64>> = vec![Vec::new(); views.len()];
            ladder.run(derive_seed(master, 0, replication(rep)?), |view, row| {
                let l = (view.n - spec.n_min) as usize;
                col[l].push(row.u[0]);
                if row.step == 0 {
                    row0[l] = row.u.to_vec();
                }
                Ok(())
            })?;
            Ok(views
                .iter()
                .enumerate()
                .map(|(l, v)| {
                    let c = Array2::from_shape_vec((col[l].len(), 1), col[l].clone()).expect("column shape");
                    let r = Array2::from_shape_vec((1, row0[l].len()), row0[l].clone()).expect("row shape");
                    let y1 = functionals_on(c.view(), v.dt, v.dx, params).y1;
                    let y2 = functionals_on(r.view(), v.dt, v.dx, params).y2;
                    (y1, y2)
                })
                .collect())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn default_pack_is_admissible() {
        let p = SeminormParams::default();
        assert!((2.0 * p.gamma1 + p.gamma2 - 0.125).abs() < 1e-15);
        assert_eq!(p.y1_exponent(), 7.5);
        assert_eq!(p.y2_exponent(), 15.0);
        assert_eq!((p.theta1, p.theta2), (0.25, 0.5));
    }

    #[test]
    fn invalid_packs_rejected() {
        assert!(SeminormParams::new(15, 5.0, 0.25, 0.04, 0.045).is_err());
        assert!(SeminormParams::new(16, 4.0, 0.25, 0.04, 0.045).is_err());
        assert!(SeminormParams::new(4, 5.0, 0.25, 0.04, 0.045).is_err());
        assert!(SeminormParams::new(16, 5.0, 0.25, 0.05, 0.045).is_err());
        assert!(SeminormParams::new(16, 5.0, 0.6, 0.04, 0.045).is_err());
        assert!(SeminormParams::new(16, 5.0, 0.25, 0.02, 0.085).is_err());
    }

    #[test]
    fn params_serde_validates() {
        let p = SeminormParams::default();
        let text = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<SeminormParams>(&text).unwrap(), p);
        let bad = r#"{"p0":16,"gamma0":5.0,"theta":0.25,"gamma1":0.05,"gamma2":0.045}"#;
        assert!(serde_json::from_str::<SeminormParams>(bad).is_err());
    }

    #[test]
    fn constant_window_is_zero() {
        let w = Array2::from_elem((17, 9), 0.7);
        let s = functionals_on(w.view(), 0.01, 0.1, &SeminormParams::default());
        assert_eq!((s.y1, s.y2, s.y3, s.z), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn threshold_monomials() {
        let p = SeminormParams::default();
        assert_eq!(grr_threshold(1.0, 1.0, &p, 1.0).unwrap(), 1.0);
        let r = grr_threshold(0.3, 0.25, &p, 2.0).unwrap();
        assert!((grr_threshold(0.6, 0.25, &p, 2.0).unwrap() / r - 2f64.powi(32)).abs() < 1e-3);
        assert!((grr_threshold(0.3, 0.125, &p, 2.0).unwrap() / r - 2.0).abs() < 1e-12);
        assert!(grr_threshold(0.0, 0.5, &p, 1.0).is_err());
    }

    #[test]
    fn y2_matches_hand_sum() {
        // Two-node row: one off-diagonal pair with trapezoid weights dx/2.
        let mut w = Array2::zeros((2, 2));
        w[[0, 1]] = 1.0;
        let p = SeminormParams::default();
        let s = functionals_on(w.view(), 1.0, 0.5, &p);
        let expect = 2.0 * 0.25 * 0.25 * 0.5f64.powf(-(p.gamma0 - 2.0));
        assert!((s.y2 - expect).abs() < 1e-15);
    }

    #[test]
    fn calibration_rules() {
        let p = SeminormParams::default();
        let flat = vec![PathRecord { z: 0.0, sup: 0.0 }; 100];
        let c = calibrate_grr_constant(&flat, &p, 1.0, 0.25).unwrap();
        assert!(c.unconstrained && c.c_cal == UNCONSTRAINED_C_CAL);
        assert!(calibrate_grr_constant(&[], &p, 1.0, 0.25).is_err());
        assert!(calibrate_grr_constant(&flat[..10], &p, 1.0, 0.25).is_err());
        let recs: Vec<PathRecord> = (1..=100).map(|i| PathRecord { z: i as f64, sup: 1.0 }).collect();
        let c = calibrate_grr_constant(&recs, &p, 1.0, 1.0).unwrap();
        assert_eq!(c.c_cal, 0.5);
        let th = Threshold { a: 1.0, zeta: 1.0, c_cal: c.c_cal, r_threshold: c.c_cal };
        assert!(recs.iter().all(|r| implication_holds(r.z, r.sup, &th)));
    }
}
