//! Gauges on compact sets: Hausdorff measure, Bessel–Riesz energy and
//! capacity, and the parabolic metric of the space-time domain.
//!
//! Hausdorff measure uses the unnormalised gauge `inf Σ (2 r_i)^β`, so a
//! segment has `H_1` equal to its length and a ball of radius `R` in `R^d`
//! has `H_d = (2R)^d`.
//!
//! The kernel family is `K_β(r) = r^{-β}` for `β > 0`, `log₊(e/r)` for
//! `β = 0` and `1` for `β < 0`. Capacity of a continuum is estimated on a
//! finite sample with the kernel evaluated at `max(r, r_min)`, where
//! `r_min` is half the sample spacing.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hitting::{cover_set, SetKind, TargetSet};

/// Parabolic distance `max(|t−s|^{1/4}, |x−y|^{1/2})`.
pub fn parabolic_metric(p1: (f64, f64), p2: (f64, f64)) -> f64 {
    (p1.0 - p2.0).abs().sqrt().sqrt().max((p1.1 - p2.1).abs().sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GaugeMethod {
    ClosedForm,
    Covering,
    EnergyMinimization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaugeResult {
    pub beta: f64,
    pub value: f64,
    pub method: GaugeMethod,
    /// Frank–Wolfe duality gap at termination.
    pub gap: Option<f64>,
    /// Kernel smoothing radius, for sampled capacities.
    pub r_min: Option<f64>,
    pub iterations: usize,
    /// False when the optimiser hit its iteration cap above tolerance.
    pub converged: bool,
}

impl GaugeResult {
    fn exact(beta: f64, value: f64) -> Self {
        Self { beta, value, method: GaugeMethod::ClosedForm, gap: None, r_min: None, iterations: 0, converged: true }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Cantor dust dimension `d·ln 2 / ln 3`.
fn dust_dimension(d: usize) -> f64 {
    d as f64 * std::f64::consts::LN_2 / 3f64.ln()
}

/// `Σ (2 r)^β` over the balls of `cover_set(a, epsilon)`.
pub fn covering_sum(a: &TargetSet, beta: f64, epsilon: f64) -> Result<f64> {
    Ok(cover_set(a, epsilon)?.iter().map(|b| (2.0 * b.radius).powf(beta)).sum())
}

/// Covering sums at `levels` successive halvings of `epsilon`.
pub fn covering_refinement(a: &TargetSet, beta: f64, epsilon: f64, levels: usize) -> Result<Vec<(f64, f64)>> {
    (0..levels)
        .map(|k| {
            let eps = epsilon * 0.5f64.powi(k as i32);
            covering_sum(a, beta, eps).map(|s| (eps, s))
        })
        .collect()
}

/// `β`-dimensional Hausdorff measure: exact where the set is parametric,
/// otherwise the smallest covering sum over three refinements (an upper
/// estimate).
pub fn hausdorff_measure(a: &TargetSet, beta: f64) -> Result<GaugeResult> {
    if !beta.is_finite() || beta < 0.0 {
        return Err(Error::Capability(format!("Hausdorff measure of index {beta} is not defined here")));
    }
    let d = a.d as f64;
    let value = match &a.kind {
        SetKind::Singleton { .. } => {
            if beta == 0.0 {
                1.0
            } else {
                0.0
            }
        }
        SetKind::Points { points } => {
            if beta > 0.0 {
                0.0
            } else {
                let mut distinct: Vec<&Vec<f64>> = Vec::new();
                for p in points {
                    if !distinct.iter().any(|q| *q == p) {
                        distinct.push(p);
                    }
                }
                distinct.len() as f64
            }
        }
        SetKind::Segment { start, end } => {
            let len = dist(start, end);
            if len == 0.0 {
                return hausdorff_measure(&TargetSet::singleton(start.clone(), a.m)?, beta);
            }
            match beta.partial_cmp(&1.0).unwrap() {
                std::cmp::Ordering::Less => f64::INFINITY,
                std::cmp::Ordering::Equal => len,
                std::cmp::Ordering::Greater => 0.0,
            }
        }
        SetKind::Ball { center, radius } => {
            if *radius == 0.0 {
                return hausdorff_measure(&TargetSet::singleton(center.clone(), a.m)?, beta);
            }
            match beta.partial_cmp(&d).unwrap() {
                std::cmp::Ordering::Less => f64::INFINITY,
                // Isodiametric: Lebesgue volume times 2^d / ω_d.
                std::cmp::Ordering::Equal => (2.0 * radius).powi(a.d as i32),
                std::cmp::Ordering::Greater => 0.0,
            }
        }
        SetKind::CantorDust { side, levels, .. } => {
            let dim = dust_dimension(a.d);
            if beta > dim + 1e-12 {
                return Ok(GaugeResult::exact(beta, 0.0));
            }
            // Finest cell of the construction, then two coarser levels.
            let finest = side * 3f64.powi(-(*levels as i32)) * d.sqrt() / 2.0 * 1.0001;
            let sums = (0..3)
                .map(|k| covering_sum(a, beta, finest * 3f64.powi(k)))
                .collect::<Result<Vec<_>>>()?;
            let value = sums.into_iter().fold(f64::INFINITY, f64::min);
            return Ok(GaugeResult { method: GaugeMethod::Covering, ..GaugeResult::exact(beta, value) });
        }
    };
    Ok(GaugeResult::exact(beta, value))
}

/// Probability measure on finitely many points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMeasure {
    pub support: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(support: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if support.is_empty() || support.len() != weights.len() {
            return Err(Error::Domain(format!(
                "{} support points with {} weights",
                support.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Domain("weights must be nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("weights sum to {total}, not 1")));
        }
        Ok(Self { support, weights })
    }

    pub fn uniform(support: Vec<Vec<f64>>) -> Result<Self> {
        let n = support.len();
        Self::new(support, vec![1.0 / n.max(1) as f64; n])
    }
}

/// `K_β(r)`; `+∞` at `r = 0` when `β ≥ 0`.
pub fn kernel(beta: f64, r: f64) -> f64 {
    if beta < 0.0 {
        1.0
    } else if r == 0.0 {
        f64::INFINITY
    } else if beta == 0.0 {
        (1.0 - r.ln()).max(0.0)
    } else {
        r.powf(-beta)
    }
}

/// `Σ_ij w_i w_j K_β(|x_i − x_j|)`, diagonal included.
pub fn riesz_energy(mu: &DiscreteMeasure, beta: f64) -> f64 {
    if beta < 0.0 {
        return 1.0;
    }
    let pts = &mu.support;
    let w = &mu.weights;
    (0..pts.len())
        .into_par_iter()
        .map(|i| {
            if w[i] == 0.0 {
                return 0.0;
            }
            let row: f64 = (0..pts.len())
                .filter(|&j| w[j] > 0.0)
                .map(|j| w[j] * kernel(beta, dist(&pts[i], &pts[j])))
                .sum();
            w[i] * row
        })
        .collect::<Vec<_>>()
        .into_iter()
        .sum()
}

/// Half the median nearest-neighbour distance of `pts`.
pub fn smoothing_radius(pts: &[Vec<f64>]) -> f64 {
    let mut nn: Vec<f64> = (0..pts.len())
        .into_par_iter()
        .map(|i| {
            (0..pts.len())
                .filter(|&j| j != i)
                .map(|j| dist(&pts[i], &pts[j]))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    nn.sort_by(f64::total_cmp);
    0.5 * nn[nn.len() / 2]
}

/// Dense smoothed kernel matrix, row-major.
pub fn kernel_matrix(pts: &[Vec<f64>], beta: f64, r_min: f64) -> Vec<f64> {
    let n = pts.len();
    (0..n)
        .into_par_iter()
        .flat_map_iter(|i| (0..n).map(move |j| kernel(beta, dist(&pts[i], &pts[j]).max(r_min))))
        .collect()
}

/// Minimiser of `wᵀKw` over the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexQp {
    pub weights: Vec<f64>,
    pub energy: f64,
    /// `∇f(w)·w − min_i ∇f(w)_i`.
    pub gap: f64,
    pub iterations: usize,
    /// Energy after every iteration, starting with the initial point.
    pub trace: Vec<f64>,
}

/// Pairwise Frank–Wolfe with exact line search for `min wᵀKw` on the
/// simplex, started from uniform weights.
pub fn frank_wolfe(k: &[f64], n: usize, tol: f64, max_iters: usize) -> SimplexQp {
    let mut w = vec![1.0 / n as f64; n];
    let mut kw: Vec<f64> = (0..n).map(|i| k[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64).collect();
    let energy = |w: &[f64], kw: &[f64]| w.iter().zip(kw).map(|(a, b)| a * b).sum::<f64>();
    let mut trace = vec![energy(&w, &kw)];
    let mut gap = f64::INFINITY;
    let mut it = 0;
    while it < max_iters {
        let f = energy(&w, &kw);
        let (s, gmin) = kw.iter().enumerate().fold((0, f64::INFINITY), |b, (i, &g)| if g < b.1 { (i, g) } else { b });
        gap = 2.0 * (f - gmin);
        if gap < tol {
            break;
        }
        let (v, _) = kw
            .iter()
            .enumerate()
            .filter(|(i, _)| w[*i] > 0.0)
            .fold((s, f64::NEG_INFINITY), |b, (i, &g)| if g > b.1 { (i, g) } else { b });
        // Move mass from v to s: f(γ) = f + 2γ(Kw_s − Kw_v) + γ²(K_ss + K_vv − 2K_sv).
        let curv = k[s * n + s] + k[v * n + v] - 2.0 * k[s * n + v];
        let slope = kw[s] - kw[v];
        let gamma = if curv > 0.0 { (-slope / curv).clamp(0.0, w[v]) } else { w[v] };
        if gamma == 0.0 {
            break;
        }
        w[s] += gamma;
        w[v] -= gamma;
        if w[v] < 1e-300 {
            w[v] = 0.0;
        }
        for (i, x) in kw.iter_mut().enumerate() {
            *x += gamma * (k[i * n + s] - k[i * n + v]);
        }
        it += 1;
        trace.push(energy(&w, &kw));
    }
    if it == max_iters {
        let f = energy(&w, &kw);
        gap = 2.0 * (f - kw.iter().copied().fold(f64::INFINITY, f64::min));
    }
    let energy = energy(&w, &kw);
    SimplexQp { weights: w, energy, gap: gap.max(0.0), iterations: it, trace }
}

pub const CAPACITY_GAP_TOL: f64 = 1e-6;

/// Bessel–Riesz capacity `1 / min energy` on an `n_points` sample of `a`.
pub fn capacity(a: &TargetSet, beta: f64, n_points: usize, max_iters: usize) -> Result<GaugeResult> {
    if n_points < 2 {
        return Err(Error::Domain(format!("capacity needs >= 2 sample points, got {n_points}")));
    }
    if !beta.is_finite() {
        return Err(Error::Domain(format!("index {beta} must be finite")));
    }
    if beta < 0.0 {
        return Ok(GaugeResult::exact(beta, 1.0));
    }
    match &a.kind {
        SetKind::Singleton { .. } | SetKind::Points { .. } => return Ok(GaugeResult::exact(beta, 0.0)),
        SetKind::Segment { start, end } if start == end => return Ok(GaugeResult::exact(beta, 0.0)),
        SetKind::Ball { radius, .. } if *radius == 0.0 => return Ok(GaugeResult::exact(beta, 0.0)),
        _ => {}
    }
    let pts = a.sample(n_points);
    if pts.len() < 2 {
        return Err(Error::Insufficient(format!("set sample has {} points", pts.len())));
    }
    let r_min = smoothing_radius(&pts);
    let k = kernel_matrix(&pts, beta, r_min);
    let qp = frank_wolfe(&k, pts.len(), CAPACITY_GAP_TOL, max_iters);
    Ok(GaugeResult {
        beta,
        value: 1.0 / qp.energy,
        method: GaugeMethod::EnergyMinimization,
        gap: Some(qp.gap),
        r_min: Some(r_min),
        iterations: qp.iterations,
        converged: qp.gap < CAPACITY_GAP_TOL,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_segment() -> TargetSet {
        TargetSet::segment(vec![0.0], vec![1.0], 1.0).unwrap()
    }

    #[test]
    fn metric_examples() {
        assert_eq!(parabolic_metric((0.3, 0.2), (0.3, 0.2)), 0.0);
        assert_eq!(parabolic_metric((0.0, 0.0), (1.0, 0.0)), 1.0);
        assert_eq!(parabolic_metric((0.0, 0.0), (0.0, 0.25)), 0.5);
    }

    #[test]
    fn closed_form_measures() {
        let z = TargetSet::singleton(vec![0.0; 3], 1.0).unwrap();
        assert_eq!(hausdorff_measure(&z, 0.0).unwrap().value, 1.0);
        let seg = TargetSet::segment(vec![0.0, 0.0], vec![0.4, 0.0], 1.0).unwrap();
        assert!((hausdorff_measure(&seg, 1.0).unwrap().value - 0.4).abs() < 1e-15);
        let pts = TargetSet::new(SetKind::Points { points: vec![vec![0.0], vec![1.0], vec![1.0]] }, 1.0).unwrap();
        assert_eq!(hausdorff_measure(&pts, 1.0).unwrap().value, 0.0);
        assert_eq!(hausdorff_measure(&pts, 0.0).unwrap().value, 2.0);
        let ball = TargetSet::new(SetKind::Ball { center: vec![0.0; 3], radius: 0.5 }, 1.0).unwrap();
        assert!((hausdorff_measure(&ball, 3.0).unwrap().value - 1.0).abs() < 1e-12);
        assert!(hausdorff_measure(&z, -1.0).is_err());
    }

    #[test]
    fn dust_cover_at_its_dimension_is_bounded() {
        let dust = TargetSet::new(SetKind::CantorDust { corner: vec![0.0, 0.0], side: 1.0, levels: 4 }, 1.0).unwrap();
        let g = hausdorff_measure(&dust, dust_dimension(2)).unwrap();
        assert_eq!(g.method, GaugeMethod::Covering);
        assert!(g.value.is_finite() && g.value <= 2f64.sqrt().powf(dust_dimension(2)) * 1.01);
    }

    #[test]
    fn energy_examples() {
        let two = DiscreteMeasure::new(vec![vec![0.0], vec![1.0]], vec![0.5, 0.5]).unwrap();
        assert_eq!(riesz_energy(&two, -0.3), 1.0);
        let atom = DiscreteMeasure::new(vec![vec![0.2]], vec![1.0]).unwrap();
        assert_eq!(riesz_energy(&atom, 0.5), f64::INFINITY);
        assert!(DiscreteMeasure::new(vec![vec![0.0]], vec![0.5]).is_err());
    }

    #[test]
    fn negative_index_and_atoms() {
        assert_eq!(capacity(&unit_segment(), -0.5, 16, 10).unwrap().value, 1.0);
        let pts = TargetSet::new(SetKind::Points { points: vec![vec![0.0], vec![0.5]] }, 1.0).unwrap();
        assert_eq!(capacity(&pts, 0.5, 16, 10).unwrap().value, 0.0);
        assert!(capacity(&unit_segment(), 0.5, 1, 10).is_err());
    }

    #[test]
    fn frank_wolfe_converges_on_segment() {
        let g = capacity(&unit_segment(), 0.5, 128, 200_000).unwrap();
        assert!(g.converged, "gap {:?}", g.gap);
        assert!((g.r_min.unwrap() - 0.5 / 127.0).abs() < 1e-12);
        assert!(g.value > 0.0 && g.value < 1.0);
    }
}
