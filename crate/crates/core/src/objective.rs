//! Tracking objective, Gauss-Newton model assembly and the
//! box-constrained stationarity measure.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fem::NodalField;
use crate::forward::{AdmissibleBox, FemOps, Params, Trajectory};
use crate::linearized::SensTrajectory;
use crate::mesh::{self, Mesh, TransferMode};

/// Observed phase fields: one per time level k = 1..K plus the
/// terminal snapshot, with provenance of the generating run.
#[derive(Debug, Clone)]
pub struct DesiredStates {
    pub mesh: Arc<Mesh>,
    /// phi_q[k-1] is the observation at time level k.
    pub phi_q: Vec<NodalField>,
    pub phi_omega: NodalField,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Provenance {
    pub params: Params,
    pub noise_delta: f64,
    pub seed: u64,
}

impl DesiredStates {
    /// Extract observations from a forward run; the terminal snapshot
    /// defaults to the last observation.
    pub fn from_trajectory(traj: &Trajectory) -> Result<Self> {
        if !traj.mesh_frozen() {
            return Err(Error::Unsupported(
                "observations require a frozen mesh sequence".into(),
            ));
        }
        let phi_q: Vec<NodalField> = traj.states[1..].iter().map(|s| s.phi.clone()).collect();
        let phi_omega = phi_q
            .last()
            .cloned()
            .ok_or_else(|| Error::invalid("cannot build observations from a 0-step run"))?;
        Ok(DesiredStates {
            mesh: traj.meshes[0].clone(),
            phi_q,
            phi_omega,
            provenance: Provenance {
                params: traj.params,
                noise_delta: 0.0,
                seed: 0,
            },
        })
    }

    pub fn step_count(&self) -> usize {
        self.phi_q.len()
    }
}

/// Weights and regularization targets of the misfit functional.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveWeights {
    pub beta_q: f64,
    pub beta_omega: f64,
    pub beta_p: f64,
    pub beta_chi: f64,
    pub beta_c: f64,
    /// A-priori parameter targets (P_d, χ_d, C_d).
    pub target: Params,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        ObjectiveWeights {
            beta_q: 1.0,
            beta_omega: 0.0,
            beta_p: 1e-8,
            beta_chi: 1e-8,
            beta_c: 1e-8,
            target: Params::new(7.0, 6.0, 2.0),
        }
    }
}

impl ObjectiveWeights {
    pub fn reg_weights(&self) -> [f64; 3] {
        [self.beta_p, self.beta_chi, self.beta_c]
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.beta_q,
            self.beta_omega,
            self.beta_p,
            self.beta_chi,
            self.beta_c,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("objective weights must be nonnegative"));
        }
        if self.beta_q + self.beta_omega <= 0.0 {
            return Err(Error::invalid("tracking weights must satisfy beta_q + beta_omega > 0"));
        }
        if self.beta_p + self.beta_chi + self.beta_c <= 0.0 {
            return Err(Error::invalid(
                "regularization weights must satisfy beta_p + beta_chi + beta_c > 0",
            ));
        }
        let t = self.target.as_array();
        if t.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("regularization targets must be nonnegative"));
        }
        Ok(())
    }
}

/// Observation at level k interpolated onto the trajectory mesh if the
/// generations differ.
pub(crate) fn data_on_mesh<'a>(
    data: &'a DesiredStates,
    field: &'a NodalField,
    target: &Arc<Mesh>,
) -> Result<std::borrow::Cow<'a, NodalField>> {
    if target.owns(field) {
        Ok(std::borrow::Cow::Borrowed(field))
    } else {
        Ok(std::borrow::Cow::Owned(mesh::transfer_nodal(
            &data.mesh,
            field,
            target,
            TransferMode::LagrangeInterpolate,
        )?))
    }
}

/// J = (β_Q/2) Σ_k τ ‖φ^k − φ_Q^k‖² + (β_Ω/2) ‖φ^K − φ_Ω‖²
///   + ½ Σ_i β_i (u_i − u_{d,i})².
pub fn evaluate_objective(
    traj: &Trajectory,
    data: &DesiredStates,
    w: &ObjectiveWeights,
    params: &Params,
) -> Result<f64> {
    if data.step_count() != traj.step_count() {
        return Err(Error::invalid(format!(
            "observation count {} does not match step count {}",
            data.step_count(),
            traj.step_count()
        )));
    }
    let mut tracking = 0.0;
    if w.beta_q > 0.0 {
        for (k, state) in traj.states[1..].iter().enumerate() {
            let ops_mesh = &traj.meshes[k + 1];
            let mass = crate::fem::assemble_mass(ops_mesh);
            let obs = data_on_mesh(data, &data.phi_q[k], ops_mesh)?;
            let r: Vec<f64> = state
                .phi
                .values()
                .iter()
                .zip(obs.values())
                .map(|(a, b)| a - b)
                .collect();
            tracking += 0.5 * w.beta_q * traj.tau * mass.quad_form(&r, &r);
        }
    }
    if w.beta_omega > 0.0 {
        let last = traj.states.last().unwrap();
        let ops_mesh = traj.meshes.last().unwrap();
        let mass = crate::fem::assemble_mass(ops_mesh);
        let obs = data_on_mesh(data, &data.phi_omega, ops_mesh)?;
        let r: Vec<f64> = last
            .phi
            .values()
            .iter()
            .zip(obs.values())
            .map(|(a, b)| a - b)
            .collect();
        tracking += 0.5 * w.beta_omega * mass.quad_form(&r, &r);
    }
    let u = params.as_array();
    let t = w.target.as_array();
    let b = w.reg_weights();
    let reg: f64 = (0..3).map(|i| 0.5 * b[i] * (u[i] - t[i]) * (u[i] - t[i])).sum();
    Ok(tracking + reg)
}

/// Gauss-Newton model of the objective at the current iterate:
/// H = Σ_k τ β_Q S_kᵀ M S_k + β_Ω S_Kᵀ M S_K + diag(β), with S_k the
/// three sensitivity fields at level k; g is the exact gradient.
pub fn gauss_newton_system(
    sens: &[SensTrajectory; 3],
    traj: &Trajectory,
    data: &DesiredStates,
    w: &ObjectiveWeights,
    params: &Params,
) -> Result<([[f64; 3]; 3], [f64; 3])> {
    let ops = FemOps::new(traj.meshes[0].clone());
    let k_steps = traj.step_count();
    let mut h = [[0.0f64; 3]; 3];
    for k in 1..=k_steps {
        let weight = if k == k_steps {
            traj.tau * w.beta_q + w.beta_omega
        } else {
            traj.tau * w.beta_q
        };
        if weight == 0.0 {
            continue;
        }
        for i in 0..3 {
            for j in i..3 {
                let v = ops
                    .mass
                    .quad_form(sens[i].phi_dot[k].values(), sens[j].phi_dot[k].values());
                h[i][j] += weight * v;
            }
        }
    }
    for i in 0..3 {
        for j in 0..i {
            h[i][j] = h[j][i];
        }
    }
    let b = w.reg_weights();
    for i in 0..3 {
        h[i][i] += b[i];
    }
    let g = crate::linearized::gradient_sensitivity(traj, sens, data, w, params)?;
    Ok((h, g))
}

/// Norm of the projected-gradient step ‖u − Proj_box(u − g)‖₂; equals
/// ‖g‖₂ at strictly interior iterates.
pub fn projected_stationarity(
    params: &Params,
    grad: &[f64; 3],
    bounds: &AdmissibleBox,
) -> Result<f64> {
    if !bounds.contains(params) {
        return Err(Error::invalid(format!(
            "iterate {:?} lies outside the admissible box",
            params.as_array()
        )));
    }
    let u = params.as_array();
    let stepped = [u[0] - grad[0], u[1] - grad[1], u[2] - grad[2]];
    let proj = bounds.project(stepped);
    let mut acc = 0.0;
    for i in 0..3 {
        acc += (u[i] - proj[i]) * (u[i] - proj[i]);
    }
    Ok(acc.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{initial_fields, simulate, SolverConfig};
    use crate::mesh::{build_uniform, Rect};
    use crate::model::{ModelConfig, Orientation};

    fn desk_instance() -> (Arc<Mesh>, ModelConfig, SolverConfig) {
        let mesh = Arc::new(
            build_uniform(
                Rect {
                    x0: -5.0,
                    y0: -5.0,
                    x1: 5.0,
                    y1: 5.0,
                },
                8,
            )
            .unwrap(),
        );
        let cfg = ModelConfig {
            eps: 0.8,
            s: 1e3,
            ..ModelConfig::default()
        };
        let solver = SolverConfig {
            tau: 0.1,
            steps: 3,
            ..SolverConfig::default()
        };
        (mesh, cfg, solver)
    }

    #[test]
    fn objective_zero_at_data_source() {
        let (mesh, cfg, solver) = desk_instance();
        let (phi0, sigma0) = initial_fields(&mesh, &cfg, Orientation::InsidePositive).unwrap();
        let params = Params::new(2.0, 1.0, 0.5);
        let traj = simulate(&mesh, &phi0, &sigma0, &params, &solver, &cfg).unwrap();
        let data = DesiredStates::from_trajectory(&traj).unwrap();
        let w = ObjectiveWeights {
            target: params,
            ..ObjectiveWeights::default()
        };
        let j = evaluate_objective(&traj, &data, &w, &params).unwrap();
        assert!(j.abs() < 1e-14, "J = {j}");
    }

    #[test]
    fn objective_pure_regularization() {
        let (mesh, cfg, solver) = desk_instance();
        let (phi0, sigma0) = initial_fields(&mesh, &cfg, Orientation::InsidePositive).unwrap();
        let params = Params::new(3.0, 0.0, 0.0);
        let traj = simulate(&mesh, &phi0, &sigma0, &params, &solver, &cfg).unwrap();
        let data = DesiredStates::from_trajectory(&traj).unwrap();
        // beta_q = beta_omega = 0 is rejected by validate, but
        // evaluate_objective itself only sums what it is given.
        let w = ObjectiveWeights {
            beta_q: 0.0,
            beta_omega: 0.0,
            beta_p: 2.0,
            beta_chi: 0.0,
            beta_c: 0.0,
            target: Params::new(0.0, 0.0, 0.0),
        };
        let j = evaluate_objective(&traj, &data, &w, &params).unwrap();
        assert!((j - 9.0).abs() < 1e-14, "J = {j}");
    }

    #[test]
    fn objective_detects_step_mismatch() {
        let (mesh, cfg, solver) = desk_instance();
        let (phi0, sigma0) = initial_fields(&mesh, &cfg, Orientation::InsidePositive).unwrap();
        let params = Params::new(1.0, 0.0, 0.0);
        let traj = simulate(&mesh, &phi0, &sigma0, &params, &solver, &cfg).unwrap();
        let mut data = DesiredStates::from_trajectory(&traj).unwrap();
        data.phi_q.pop();
        assert!(evaluate_objective(&traj, &data, &ObjectiveWeights::default(), &params).is_err());
    }

    #[test]
    fn weights_validation() {
        assert!(ObjectiveWeights::default().validate().is_ok());
        assert!(ObjectiveWeights {
            beta_q: 0.0,
            beta_omega: 0.0,
            ..ObjectiveWeights::default()
        }
        .validate()
        .is_err());
        assert!(ObjectiveWeights {
            beta_p: 0.0,
            beta_chi: 0.0,
            beta_c: 0.0,
            ..ObjectiveWeights::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn stationarity_interior_and_clipped() {
        let bounds = AdmissibleBox {
            p_max: 10.0,
            chi_max: 10.0,
            c_max: 10.0,
        };
        let interior = Params::new(5.0, 5.0, 5.0);
        let g = [0.3, -0.4, 0.0];
        let s = projected_stationarity(&interior, &g, &bounds).unwrap();
        assert!((s - 0.5).abs() < 1e-15);

        // At the upper bound with a gradient pushing outward the
        // component is clipped away.
        let at_bound = Params::new(10.0, 5.0, 5.0);
        let g = [-2.0, 0.0, 0.0];
        let s = projected_stationarity(&at_bound, &g, &bounds).unwrap();
        assert_eq!(s, 0.0);

        let zero = projected_stationarity(&interior, &[0.0; 3], &bounds).unwrap();
        assert_eq!(zero, 0.0);

        let outside = Params::new(11.0, 0.0, 0.0);
        assert!(projected_stationarity(&outside, &[0.0; 3], &bounds).is_err());
    }
}
