//! Trust-region Gauss-Newton identification over the admissible box.
//!
//! The model subproblem minimizes g·d + ½ dᵀHd over the intersection of
//! the shifted box and the ∞-norm trust region, which is again a box,
//! so the 3-variable problem is solved exactly by enumerating all 3³
//! active-set patterns.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fem::NodalField;
use crate::forward::{simulate, AdmissibleBox, Params, SolverConfig, Trajectory};
use crate::linalg::solve_dense_small;
use crate::linearized::{sensitivity_batch, SensTrajectory};
use crate::mesh::Mesh;
use crate::model::ModelConfig;
use crate::objective::{
    evaluate_objective, gauss_newton_system, projected_stationarity, DesiredStates,
    ObjectiveWeights,
};

/// Trust-region schedule and stopping rules.
#[derive(Debug, Clone, Copy)]
pub struct TRConfig {
    pub delta0: f64,
    pub delta_max: f64,
    pub eta_accept: f64,
    pub shrink_threshold: f64,
    pub expand_threshold: f64,
    pub shrink_factor: f64,
    pub expand_factor: f64,
    pub grad_tol: f64,
    pub rel_step_tol: f64,
    pub max_outer_iters: usize,
}

impl Default for TRConfig {
    fn default() -> Self {
        TRConfig {
            delta0: 2.0,
            delta_max: 8.0,
            eta_accept: 0.1,
            shrink_threshold: 0.25,
            expand_threshold: 0.75,
            shrink_factor: 0.5,
            expand_factor: 2.0,
            grad_tol: 1e-2,
            rel_step_tol: 1e-4,
            max_outer_iters: 100,
        }
    }
}

impl TRConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_accept > 0.0
            && self.eta_accept < self.shrink_threshold
            && self.shrink_threshold < self.expand_threshold)
        {
            return Err(Error::invalid(
                "trust-region thresholds must satisfy 0 < eta_accept < shrink < expand",
            ));
        }
        if !(self.delta0 > 0.0 && self.delta0 <= self.delta_max) {
            return Err(Error::invalid("radii must satisfy 0 < delta0 <= delta_max"));
        }
        if !(self.shrink_factor > 0.0 && self.shrink_factor < 1.0 && self.expand_factor > 1.0) {
            return Err(Error::invalid("radius factors must shrink and expand"));
        }
        if !(self.grad_tol > 0.0 && self.rel_step_tol > 0.0) {
            return Err(Error::invalid("stopping tolerances must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// Projected stationarity reached `grad_tol`.
    Stationarity,
    /// Relative change of the iterate fell below `rel_step_tol`.
    RelativeStep,
    /// Outer iteration budget exhausted.
    MaxIterations,
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Termination::Stationarity => write!(f, "stationarity"),
            Termination::RelativeStep => write!(f, "relative-step"),
            Termination::MaxIterations => write!(f, "max-iterations"),
        }
    }
}

/// One outer iteration of the identification loop.
#[derive(Debug, Clone)]
pub struct IterRecord {
    pub iterate: Params,
    pub objective: f64,
    pub stationarity: f64,
    pub delta: f64,
    pub step_norm: f64,
    pub accepted: bool,
    /// Bounds active at the iterate, e.g. "C+" for C at its upper bound.
    pub active_bounds: String,
}

/// Full identification history.
#[derive(Debug, Clone)]
pub struct IdentResult {
    pub records: Vec<IterRecord>,
    pub final_params: Params,
    pub final_objective: f64,
    pub termination: Termination,
}

/// Everything an identification run needs besides the start point.
pub struct IdentProblem<'a> {
    pub mesh: &'a Arc<Mesh>,
    pub phi0: &'a NodalField,
    pub sigma0: &'a NodalField,
    pub cfg: &'a ModelConfig,
    pub solver: &'a SolverConfig,
    pub weights: &'a ObjectiveWeights,
    pub bounds: &'a AdmissibleBox,
    pub data: &'a DesiredStates,
}

fn model_value(h: &[[f64; 3]; 3], g: &[f64; 3], d: &[f64; 3]) -> f64 {
    let mut v = 0.0;
    for i in 0..3 {
        v += g[i] * d[i];
        for j in 0..3 {
            v += 0.5 * d[i] * h[i][j] * d[j];
        }
    }
    v
}

/// Exact minimizer of the quadratic model over
/// {center + d in box} ∩ {‖d‖_∞ ≤ delta}: enumerate the 27 active-set
/// patterns, solve the free block of each, keep the feasible candidate
/// with least model value (ties by smaller ‖d‖₂).
pub fn solve_box_tr_subproblem(
    h: &[[f64; 3]; 3],
    g: &[f64; 3],
    center: &Params,
    bounds: &AdmissibleBox,
    delta: f64,
) -> Result<[f64; 3]> {
    if !bounds.contains(center) {
        return Err(Error::invalid("subproblem center must lie in the box"));
    }
    if !(delta > 0.0) {
        return Err(Error::invalid("trust radius must be positive"));
    }
    // Symmetric PSD check via eigenvalue lower bound (Gershgorin is too
    // crude for Gram matrices; use the smallest pivot of a symmetric
    // elimination with a relative tolerance).
    let scale = (0..3).map(|i| h[i][i].abs()).fold(0.0f64, f64::max).max(1e-300);
    for i in 0..3 {
        for j in 0..3 {
            if (h[i][j] - h[j][i]).abs() > 1e-12 * scale {
                return Err(Error::Numerical("model Hessian is not symmetric".into()));
            }
        }
    }
    if !psd_within(h, 1e-10 * scale) {
        return Err(Error::Numerical(
            "model Hessian is not positive semidefinite within tolerance".into(),
        ));
    }

    let c = center.as_array();
    let hi = bounds.upper();
    let mut lo_b = [0.0f64; 3];
    let mut up_b = [0.0f64; 3];
    for i in 0..3 {
        lo_b[i] = (-delta).max(-c[i]);
        up_b[i] = delta.min(hi[i] - c[i]);
    }

    let mut best: Option<([f64; 3], f64, f64)> = None;
    // Pattern encoding per coordinate: 0 = at lower, 1 = free, 2 = at upper.
    for code in 0..27usize {
        let states = [code % 3, (code / 3) % 3, (code / 9) % 3];
        let mut d = [0.0f64; 3];
        let free: Vec<usize> = (0..3).filter(|&i| states[i] == 1).collect();
        for i in 0..3 {
            match states[i] {
                0 => d[i] = lo_b[i],
                2 => d[i] = up_b[i],
                _ => {}
            }
        }
        if !free.is_empty() {
            let m = free.len();
            let mut a = vec![vec![0.0f64; m]; m];
            let mut rhs = vec![0.0f64; m];
            for (r, &i) in free.iter().enumerate() {
                let mut acc = g[i];
                for j in 0..3 {
                    if states[j] != 1 {
                        acc += h[i][j] * d[j];
                    }
                }
                rhs[r] = -acc;
                for (s, &j) in free.iter().enumerate() {
                    a[r][s] = h[i][j];
                }
            }
            let Some(sol) = solve_dense_small(&a, &rhs, 1e-13) else {
                continue;
            };
            let mut feasible = true;
            for (r, &i) in free.iter().enumerate() {
                let tol = 1e-12 * (1.0 + up_b[i].abs() + lo_b[i].abs());
                if sol[r] < lo_b[i] - tol || sol[r] > up_b[i] + tol {
                    feasible = false;
                    break;
                }
                d[i] = sol[r].clamp(lo_b[i], up_b[i]);
            }
            if !feasible {
                continue;
            }
        }
        let value = model_value(h, g, &d);
        let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let better = match &best {
            None => true,
            Some((_, bv, bn)) => value < *bv || (value == *bv && norm < *bn),
        };
        if better {
            best = Some((d, value, norm));
        }
    }
    Ok(best.expect("corner patterns are always feasible").0)
}

fn psd_within(h: &[[f64; 3]; 3], tol: f64) -> bool {
    // Characteristic-polynomial-free check: symmetric Gaussian
    // elimination; a pivot below -tol certifies a negative eigenvalue.
    let mut a = *h;
    for k in 0..3 {
        if a[k][k] < -tol {
            return false;
        }
        if a[k][k] <= tol {
            // Semi-definite direction: off-diagonal must vanish too.
            for j in (k + 1)..3 {
                if a[k][j].abs() > tol.max(1e-300).sqrt() * 10.0 {
                    return false;
                }
            }
            continue;
        }
        for i in (k + 1)..3 {
            let f = a[i][k] / a[k][k];
            for j in k..3 {
                a[i][j] -= f * a[k][j];
            }
        }
    }
    true
}

/// KKT residual of a candidate step for the box∩trust-region problem
/// (used by the verification suites).
pub fn subproblem_kkt_residual(
    h: &[[f64; 3]; 3],
    g: &[f64; 3],
    center: &Params,
    bounds: &AdmissibleBox,
    delta: f64,
    d: &[f64; 3],
) -> f64 {
    let c = center.as_array();
    let hi = bounds.upper();
    let mut grad = [0.0f64; 3];
    for i in 0..3 {
        grad[i] = g[i];
        for j in 0..3 {
            grad[i] += h[i][j] * d[j];
        }
    }
    let scale = grad
        .iter()
        .map(|v| v.abs())
        .fold(1.0f64, f64::max);
    let mut worst = 0.0f64;
    for i in 0..3 {
        let lo = (-delta).max(-c[i]);
        let up = delta.min(hi[i] - c[i]);
        let at_lo = (d[i] - lo).abs() <= 1e-11 * (1.0 + lo.abs());
        let at_up = (d[i] - up).abs() <= 1e-11 * (1.0 + up.abs());
        let viol = if at_lo && at_up {
            0.0
        } else if at_lo {
            (-grad[i]).max(0.0)
        } else if at_up {
            grad[i].max(0.0)
        } else {
            grad[i].abs()
        };
        worst = worst.max(viol / scale);
        // Feasibility itself.
        worst = worst.max((lo - d[i]).max(0.0));
        worst = worst.max((d[i] - up).max(0.0));
    }
    worst
}

fn active_bounds_label(u: &Params, bounds: &AdmissibleBox) -> String {
    let a = u.as_array();
    let hi = bounds.upper();
    let names = ["P", "chi", "C"];
    let mut parts = Vec::new();
    for i in 0..3 {
        if a[i] <= 0.0 {
            parts.push(format!("{}-", names[i]));
        } else if a[i] >= hi[i] {
            parts.push(format!("{}+", names[i]));
        }
    }
    parts.join("|")
}

fn l2(d: &[f64; 3]) -> f64 {
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

fn linf(d: &[f64; 3]) -> f64 {
    d.iter().map(|v| v.abs()).fold(0.0, f64::max)
}

/// Trust-region Gauss-Newton loop. A forward failure at a trial point
/// rejects the step and shrinks the radius; a failure at the start is a
/// hard error.
pub fn identify(problem: &IdentProblem, start: Params, trc: &TRConfig) -> Result<IdentResult> {
    trc.validate()?;
    problem.weights.validate()?;
    problem.bounds.validate()?;
    start.validate()?;
    if !problem.bounds.contains(&start) {
        return Err(Error::invalid("start point must lie in the admissible box"));
    }

    let run = |p: &Params| -> Result<Trajectory> {
        simulate(
            problem.mesh,
            problem.phi0,
            problem.sigma0,
            p,
            problem.solver,
            problem.cfg,
        )
    };

    let mut u = start;
    let mut traj = run(&u)?;
    let mut j = evaluate_objective(&traj, problem.data, problem.weights, &u)?;
    let mut delta = trc.delta0;
    let mut records: Vec<IterRecord> = Vec::new();
    let mut termination = Termination::MaxIterations;
    let mut last_stat = f64::INFINITY;

    let unit_dirs = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

    for _iter in 0..trc.max_outer_iters {
        let sens_vec = sensitivity_batch(&traj, problem.cfg, &unit_dirs)?;
        let sens: [SensTrajectory; 3] = sens_vec
            .try_into()
            .map_err(|_| Error::Numerical("sensitivity batch size mismatch".into()))?;
        let (h, g) =
            gauss_newton_system(&sens, &traj, problem.data, problem.weights, &u)?;
        let stat = projected_stationarity(&u, &g, problem.bounds)?;
        last_stat = stat;

        if stat <= trc.grad_tol {
            records.push(IterRecord {
                iterate: u,
                objective: j,
                stationarity: stat,
                delta,
                step_norm: 0.0,
                accepted: true,
                active_bounds: active_bounds_label(&u, problem.bounds),
            });
            termination = Termination::Stationarity;
            break;
        }

        let d = solve_box_tr_subproblem(&h, &g, &u, problem.bounds, delta)?;
        let predicted = -model_value(&h, &g, &d);
        let trial = Params::from_array(problem.bounds.project([
            u.proliferation + d[0],
            u.chemotaxis + d[1],
            u.consumption + d[2],
        ]));

        // Forward failures at the trial point count as rho = -inf.
        let trial_outcome = match run(&trial) {
            Ok(t) => {
                let jt = evaluate_objective(&t, problem.data, problem.weights, &trial)?;
                Some((t, jt))
            }
            Err(Error::Nonconvergence { .. }) | Err(Error::Numerical(_)) => None,
            Err(other) => return Err(other),
        };
        let rho = match &trial_outcome {
            Some((_, jt)) if predicted > 0.0 => (j - jt) / predicted,
            _ => f64::NEG_INFINITY,
        };
        let accepted = rho >= trc.eta_accept;

        records.push(IterRecord {
            iterate: u,
            objective: j,
            stationarity: stat,
            delta,
            step_norm: l2(&d),
            accepted,
            active_bounds: active_bounds_label(&u, problem.bounds),
        });

        // Classical radius schedule; expansion only when the step
        // pressed against the trust-region boundary.
        if rho < trc.shrink_threshold {
            delta *= trc.shrink_factor;
        } else if rho > trc.expand_threshold && linf(&d) >= delta * (1.0 - 1e-12) {
            delta = (delta * trc.expand_factor).min(trc.delta_max);
        }

        if accepted {
            let (t, jt) = trial_outcome.unwrap();
            let prev_norm = l2(&u.as_array());
            u = trial;
            traj = t;
            j = jt;
            let rel = l2(&d) / prev_norm.max(1e-30);
            if rel <= trc.rel_step_tol {
                termination = Termination::RelativeStep;
                break;
            }
        }
    }

    // Final row duplicates the converged iterate.
    records.push(IterRecord {
        iterate: u,
        objective: j,
        stationarity: last_stat,
        delta,
        step_norm: 0.0,
        accepted: true,
        active_bounds: active_bounds_label(&u, problem.bounds),
    });

    Ok(IdentResult {
        records,
        final_params: u,
        final_objective: j,
        termination,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn box10() -> AdmissibleBox {
        AdmissibleBox {
            p_max: 10.0,
            chi_max: 10.0,
            c_max: 10.0,
        }
    }

    #[test]
    fn subproblem_zero_gradient_gives_zero_step() {
        let h = [[2.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 3.0]];
        let d = solve_box_tr_subproblem(
            &h,
            &[0.0; 3],
            &Params::new(5.0, 5.0, 5.0),
            &box10(),
            2.0,
        )
        .unwrap();
        assert_eq!(d, [0.0; 3]);
    }

    #[test]
    fn subproblem_clips_at_radius() {
        let h = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let g = [-10.0, 0.0, 0.0];
        let d = solve_box_tr_subproblem(&h, &g, &Params::new(5.0, 5.0, 5.0), &box10(), 2.0)
            .unwrap();
        assert!((d[0] - 2.0).abs() < 1e-12);
        assert!(d[1].abs() < 1e-12 && d[2].abs() < 1e-12);
    }

    #[test]
    fn subproblem_respects_box_over_radius() {
        // Center near the upper bound: the box is tighter than the radius.
        let h = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let g = [-10.0, 0.0, 0.0];
        let d = solve_box_tr_subproblem(&h, &g, &Params::new(9.5, 5.0, 5.0), &box10(), 2.0)
            .unwrap();
        assert!((d[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn subproblem_rejects_indefinite_hessian() {
        let h = [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(
            solve_box_tr_subproblem(&h, &[0.0; 3], &Params::new(5.0, 5.0, 5.0), &box10(), 1.0)
                .is_err()
        );
    }

    fn lcg(state: &mut u64) -> f64 {
        *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*state >> 11) as f64) / ((1u64 << 53) as f64)
    }

    fn random_instance(
        state: &mut u64,
    ) -> ([[f64; 3]; 3], [f64; 3], Params, AdmissibleBox, f64) {
        let mut a = [[0.0f64; 3]; 3];
        for row in a.iter_mut() {
            for v in row.iter_mut() {
                *v = 2.0 * lcg(state) - 1.0;
            }
        }
        let mut h = [[0.0f64; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    h[i][j] += a[k][i] * a[k][j];
                }
            }
            h[i][i] += 0.05;
        }
        let g = [
            10.0 * lcg(state) - 5.0,
            10.0 * lcg(state) - 5.0,
            10.0 * lcg(state) - 5.0,
        ];
        let bounds = box10();
        let center = Params::new(10.0 * lcg(state), 10.0 * lcg(state), 10.0 * lcg(state));
        let delta = 0.5 + 2.5 * lcg(state);
        (h, g, center, bounds, delta)
    }

    #[test]
    fn subproblem_matches_grid_oracle() {
        let mut state = 2024u64;
        for trial in 0..100 {
            let (h, g, center, bounds, delta) = random_instance(&mut state);
            let d = solve_box_tr_subproblem(&h, &g, &center, &bounds, delta).unwrap();
            let value = model_value(&h, &g, &d);

            // Dense grid over the feasible box.
            let c = center.as_array();
            let hi = bounds.upper();
            let mut lo_b = [0.0f64; 3];
            let mut up_b = [0.0f64; 3];
            for i in 0..3 {
                lo_b[i] = (-delta).max(-c[i]);
                up_b[i] = delta.min(hi[i] - c[i]);
            }
            let mut grid_best = f64::INFINITY;
            let n = 101;
            for i in 0..n {
                let di = lo_b[0] + (up_b[0] - lo_b[0]) * i as f64 / (n - 1) as f64;
                for jj in 0..n {
                    let dj = lo_b[1] + (up_b[1] - lo_b[1]) * jj as f64 / (n - 1) as f64;
                    for kk in 0..n {
                        let dk = lo_b[2] + (up_b[2] - lo_b[2]) * kk as f64 / (n - 1) as f64;
                        let v = model_value(&h, &g, &[di, dj, dk]);
                        if v < grid_best {
                            grid_best = v;
                        }
                    }
                }
            }
            assert!(
                value <= grid_best + 1e-8,
                "trial {trial}: exact {value} vs grid {grid_best}"
            );
            let kkt = subproblem_kkt_residual(&h, &g, &center, &bounds, delta, &d);
            assert!(kkt <= 1e-10, "trial {trial}: KKT residual {kkt}");
        }
    }

    #[test]
    fn tr_config_validation() {
        assert!(TRConfig::default().validate().is_ok());
        assert!(TRConfig {
            eta_accept: 0.3,
            ..TRConfig::default()
        }
        .validate()
        .is_err());
        assert!(TRConfig {
            delta0: 20.0,
            ..TRConfig::default()
        }
        .validate()
        .is_err());
    }
}
