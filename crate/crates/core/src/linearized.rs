//! Exact derivatives of the discrete forward map: sensitivity
//! trajectories per control direction and the transposed (adjoint)
//! recursion, plus both gradient assemblies.
//!
//! Everything here differentiates the implemented scheme itself — the
//! lagged mobility and indicator fields, the interpolated nonlinear
//! products and the lumped potential term — so the sensitivity route
//! and the adjoint route agree with each other and with finite
//! differences of the discrete objective up to solver precision.
//! Derivatives are only defined on a frozen mesh sequence.

use crate::error::{Error, Result};
use crate::fem::{self, NodalField};
use crate::forward::{
    build_coupled_band, build_ch_jacobian, interleaved_solve_with, FemOps, Params, Trajectory,
};
use crate::linalg::{self, BandLu, SparseOperator};
use crate::model::{self, ModelConfig};
use crate::objective::{data_on_mesh, DesiredStates, ObjectiveWeights};

/// Linearized state triple per time level for one control direction;
/// the fields at level 0 vanish.
#[derive(Debug, Clone)]
pub struct SensTrajectory {
    pub direction: [f64; 3],
    /// Linearized phase field Φ^k, k = 0..=K.
    pub phi_dot: Vec<NodalField>,
    /// Linearized potential Ξ^k.
    pub mu_dot: Vec<NodalField>,
    /// Linearized nutrient Σ^k.
    pub sigma_dot: Vec<NodalField>,
}

/// Multipliers of the backward recursion. `p[k-1]`, `q[k-1]`, `r[k-1]`
/// belong to step k; the terminal data that seeds the recursion is kept
/// separately and `terminal_r` is identically zero.
#[derive(Debug, Clone)]
pub struct AdjTrajectory {
    pub p: Vec<NodalField>,
    pub q: Vec<NodalField>,
    pub r: Vec<NodalField>,
    pub terminal_p: NodalField,
    pub terminal_r: NodalField,
}

fn require_frozen(traj: &Trajectory) -> Result<()> {
    if !traj.mesh_frozen() {
        return Err(Error::Unsupported(
            "derivatives require a frozen mesh sequence (run with adaptivity off)".into(),
        ));
    }
    Ok(())
}

/// Assembled operators of one time step shared by all linearized solves.
struct StepOperators {
    /// Mobility-weighted stiffness at the lagged phase field.
    k_m: SparseOperator,
    /// Consumption-weighted mass at the lagged phase field.
    m_h: SparseOperator,
    /// Nutrient system matrix M + τK + τC·M_h.
    a_sigma: SparseOperator,
    /// Lumped curvature (β/ε)·M_L·Ψ''(φ^k) of the potential term.
    psi2_lumped: Vec<f64>,
}

fn step_operators(
    ops: &FemOps,
    cfg: &ModelConfig,
    params: &Params,
    tau: f64,
    phi_prev: &NodalField,
    phi_now: &NodalField,
) -> StepOperators {
    let m_w: Vec<f64> = phi_prev
        .values()
        .iter()
        .map(|&x| model::mobility(x, cfg))
        .collect();
    let h_w: Vec<f64> = phi_prev
        .values()
        .iter()
        .map(|&x| model::h_tumour(x))
        .collect();
    let k_m = fem::assemble_weighted_stiffness_signed(&ops.mesh, &m_w);
    let m_h = fem::assemble_weighted_mass(&ops.mesh, &h_w);
    let a_sigma = SparseOperator::linear_comb(&[
        (1.0, &ops.mass),
        (tau, &ops.stiffness),
        (tau * params.consumption, &m_h),
    ]);
    let psi2_lumped: Vec<f64> = phi_now
        .values()
        .iter()
        .zip(&ops.lumped)
        .map(|(&x, &ml)| {
            let (_, psi2) = model::psi_derivs(x, cfg);
            cfg.beta / cfg.eps * ml * psi2
        })
        .collect();
    StepOperators {
        k_m,
        m_h,
        a_sigma,
        psi2_lumped,
    }
}

/// Solve the linearized recursion for several control directions at
/// once, sharing the per-step assemblies and factorizations.
pub fn sensitivity_batch(
    traj: &Trajectory,
    cfg: &ModelConfig,
    directions: &[[f64; 3]],
) -> Result<Vec<SensTrajectory>> {
    require_frozen(traj)?;
    let ops = FemOps::new(traj.meshes[0].clone());
    let n = ops.mesh.n_nodes();
    let tau = traj.tau;
    let params = traj.params;
    let k_steps = traj.step_count();

    let zero = NodalField::constant(&ops.mesh, 0.0);
    let mut out: Vec<SensTrajectory> = directions
        .iter()
        .map(|&d| SensTrajectory {
            direction: d,
            phi_dot: vec![zero.clone()],
            mu_dot: vec![zero.clone()],
            sigma_dot: vec![zero.clone()],
        })
        .collect();

    for k in 1..=k_steps {
        let phi_prev = &traj.states[k - 1].phi;
        let sigma_now = &traj.states[k].sigma;
        let phi_now = &traj.states[k].phi;
        let mu_now = &traj.states[k].mu;
        let step = step_operators(&ops, cfg, &params, tau, phi_prev, phi_now);

        let a_sigma_lu = linalg::factor_csr(&step.a_sigma, &ops.ordering)?;
        let jac = build_ch_jacobian(
            &ops,
            &step.k_m,
            tau,
            cfg.beta * cfg.eps,
            &step.psi2_lumped,
        );
        let jac_lu = BandLu::factor(jac)?;

        // Step-local coefficient fields of the linearization.
        let hp: Vec<f64> = phi_prev
            .values()
            .iter()
            .map(|&x| model::h_tumour_deriv(x))
            .collect();
        let mp: Vec<f64> = phi_prev
            .values()
            .iter()
            .map(|&x| model::mobility_deriv(x, cfg))
            .collect();
        let fg: Vec<f64> = phi_prev
            .values()
            .iter()
            .zip(sigma_now.values())
            .map(|(&p, &s)| model::f_interface(p) * model::g_cutoff(s, cfg))
            .collect();
        let fpg: Vec<f64> = phi_prev
            .values()
            .iter()
            .zip(sigma_now.values())
            .map(|(&p, &s)| model::f_interface_deriv(p) * model::g_cutoff(s, cfg))
            .collect();
        let fgp: Vec<f64> = phi_prev
            .values()
            .iter()
            .zip(sigma_now.values())
            .map(|(&p, &s)| model::f_interface(p) * model::g_cutoff_deriv(s, cfg))
            .collect();
        let m_fg = ops.mass.matvec(&fg);
        let mh_sigma = step.m_h.matvec(sigma_now.values());
        let km_sigma = step.k_m.matvec(sigma_now.values());
        // μ^k + χ σ^k enters the mobility-derivative transport term.
        let z: Vec<f64> = mu_now
            .values()
            .iter()
            .zip(sigma_now.values())
            .map(|(&m, &s)| m + params.chemotaxis * s)
            .collect();

        for sens in out.iter_mut() {
            let [u_p, u_chi, u_c] = sens.direction;
            let phi_dot_prev = sens.phi_dot[k - 1].values();
            let sigma_dot_prev = sens.sigma_dot[k - 1].values();

            // Nutrient linearization.
            let w_h: Vec<f64> = hp
                .iter()
                .zip(phi_dot_prev)
                .map(|(&d, &v)| d * v)
                .collect();
            let mh_dot_sigma = fem::assemble_weighted_mass(&ops.mesh, &w_h)
                .matvec(sigma_now.values());
            let m_sdot = ops.mass.matvec(sigma_dot_prev);
            let rhs_sigma: Vec<f64> = (0..n)
                .map(|i| {
                    m_sdot[i]
                        - tau * u_c * mh_sigma[i]
                        - tau * params.consumption * mh_dot_sigma[i]
                })
                .collect();
            let sigma_dot = linalg::lu_solve_permuted(&a_sigma_lu, &ops.ordering, &rhs_sigma);

            // Phase/potential linearization.
            let w_m: Vec<f64> = mp
                .iter()
                .zip(phi_dot_prev)
                .map(|(&d, &v)| d * v)
                .collect();
            let km_dot_z =
                fem::assemble_weighted_stiffness_signed(&ops.mesh, &w_m).matvec(&z);
            let m_pdot = ops.mass.matvec(phi_dot_prev);
            let fpg_pdot: Vec<f64> = fpg
                .iter()
                .zip(phi_dot_prev)
                .map(|(&a, &v)| a * v)
                .collect();
            let m_fpg_pdot = ops.mass.matvec(&fpg_pdot);
            let fgp_sdot: Vec<f64> = fgp.iter().zip(&sigma_dot).map(|(&a, &v)| a * v).collect();
            let m_fgp_sdot = ops.mass.matvec(&fgp_sdot);
            let km_sigma_dot = step.k_m.matvec(&sigma_dot);
            let rhs_phase: Vec<f64> = (0..n)
                .map(|i| {
                    m_pdot[i] + tau * u_p * m_fg[i]
                        + tau * params.proliferation * (m_fpg_pdot[i] + m_fgp_sdot[i])
                        - tau * u_chi * km_sigma[i]
                        - tau * km_dot_z[i]
                        - tau * params.chemotaxis * km_sigma_dot[i]
                })
                .collect();
            let zeros = vec![0.0; n];
            let (phi_dot, mu_dot) = interleaved_solve_with(&ops, &jac_lu, &rhs_phase, &zeros);

            let generation = ops.mesh.generation();
            sens.phi_dot.push(NodalField::new(generation, phi_dot));
            sens.mu_dot.push(NodalField::new(generation, mu_dot));
            sens.sigma_dot.push(NodalField::new(generation, sigma_dot));
        }
    }
    Ok(out)
}

/// Sensitivity trajectory for a single control direction.
pub fn sensitivity_simulate(
    traj: &Trajectory,
    cfg: &ModelConfig,
    direction: [f64; 3],
) -> Result<SensTrajectory> {
    Ok(sensitivity_batch(traj, cfg, &[direction])?.pop().unwrap())
}

/// Backward (transposed) recursion. Each step solves the transposed
/// phase/potential block for (p, q), then the nutrient system (its own
/// transpose) for r, injecting the tracking residuals as sources.
pub fn adjoint_simulate(
    traj: &Trajectory,
    cfg: &ModelConfig,
    data: &DesiredStates,
    weights: &ObjectiveWeights,
) -> Result<AdjTrajectory> {
    require_frozen(traj)?;
    let k_steps = traj.step_count();
    if data.step_count() != k_steps {
        return Err(Error::invalid(format!(
            "observation count {} does not match step count {k_steps}",
            data.step_count()
        )));
    }
    let ops = FemOps::new(traj.meshes[0].clone());
    let n = ops.mesh.n_nodes();
    let tau = traj.tau;
    let params = traj.params;
    let generation = ops.mesh.generation();

    let phi_terminal = &traj.states[k_steps].phi;
    let obs_omega = data_on_mesh(data, &data.phi_omega, &traj.meshes[k_steps])?;
    let terminal_p = NodalField::new(
        generation,
        phi_terminal
            .values()
            .iter()
            .zip(obs_omega.values())
            .map(|(&a, &b)| weights.beta_omega * (a - b))
            .collect(),
    );
    let terminal_r = NodalField::constant(&ops.mesh, 0.0);

    let mut p_fields = vec![NodalField::constant(&ops.mesh, 0.0); k_steps];
    let mut q_fields = p_fields.clone();
    let mut r_fields = p_fields.clone();

    for k in (1..=k_steps).rev() {
        let phi_prev = &traj.states[k - 1].phi;
        let phi_now = &traj.states[k].phi;
        let sigma_now = &traj.states[k].sigma;
        let step = step_operators(&ops, cfg, &params, tau, phi_prev, phi_now);

        // Tracking source of step k.
        let obs = data_on_mesh(data, &data.phi_q[k - 1], &traj.meshes[k])?;
        let resid: Vec<f64> = phi_now
            .values()
            .iter()
            .zip(obs.values())
            .map(|(&a, &b)| a - b)
            .collect();
        let mut s_p: Vec<f64> = ops
            .mass
            .matvec(&resid)
            .iter()
            .map(|v| tau * weights.beta_q * v)
            .collect();
        if k == k_steps {
            let resid_omega: Vec<f64> = phi_terminal
                .values()
                .iter()
                .zip(obs_omega.values())
                .map(|(&a, &b)| a - b)
                .collect();
            let m_ro = ops.mass.matvec(&resid_omega);
            for i in 0..n {
                s_p[i] += weights.beta_omega * m_ro[i];
            }
        } else {
            // Couplings of step k+1 through its lagged field φ^k.
            let p_next = p_fields[k].values();
            let r_next = r_fields[k].values();
            let sigma_next = traj.states[k + 1].sigma.values();
            let mu_next = traj.states[k + 1].mu.values();
            let z_next: Vec<f64> = mu_next
                .iter()
                .zip(sigma_next)
                .map(|(&m, &s)| m + params.chemotaxis * s)
                .collect();
            let wsp = fem::weighted_stiffness_partials(&ops.mesh, &z_next, p_next);
            let wmp = fem::weighted_mass_partials(&ops.mesh, sigma_next, r_next);
            let m_pnext = ops.mass.matvec(p_next);
            for i in 0..n {
                let phi_i = phi_now.values()[i];
                let fpg =
                    model::f_interface_deriv(phi_i) * model::g_cutoff(sigma_next[i], cfg);
                s_p[i] += m_pnext[i] - tau * model::mobility_deriv(phi_i, cfg) * wsp[i]
                    + tau * params.proliferation * fpg * m_pnext[i]
                    - tau * params.consumption * model::h_tumour_deriv(phi_i) * wmp[i];
            }
        }

        // Transposed phase/potential block:
        // [[M, βεK + diag(ψ2)], [τK_m, -M]] (p; q) = (s_p; 0).
        let band = build_coupled_band(
            &ops,
            (1.0, &ops.mass),
            (cfg.beta * cfg.eps, &ops.stiffness),
            (tau, &step.k_m),
            (-1.0, &ops.mass),
            Some(&step.psi2_lumped),
            None,
        );
        let zeros = vec![0.0; n];
        let (p_k, q_k) = crate::forward::solve_interleaved(&ops, band, &s_p, &zeros)?;

        // Transposed nutrient equation for r.
        let m_pk = ops.mass.matvec(&p_k);
        let km_pk = step.k_m.matvec(&p_k);
        let mut rhs_r: Vec<f64> = (0..n)
            .map(|i| {
                let fgp = model::f_interface(phi_prev.values()[i])
                    * model::g_cutoff_deriv(sigma_now.values()[i], cfg);
                tau * params.proliferation * fgp * m_pk[i] - tau * params.chemotaxis * km_pk[i]
            })
            .collect();
        if k < k_steps {
            let m_rnext = ops.mass.matvec(r_fields[k].values());
            for i in 0..n {
                rhs_r[i] += m_rnext[i];
            }
        }
        let r_k = linalg::solve_csr(&step.a_sigma, &rhs_r, &ops.ordering)?;

        p_fields[k - 1] = NodalField::new(generation, p_k);
        q_fields[k - 1] = NodalField::new(generation, q_k);
        r_fields[k - 1] = NodalField::new(generation, r_k);
    }

    Ok(AdjTrajectory {
        p: p_fields,
        q: q_fields,
        r: r_fields,
        terminal_p,
        terminal_r,
    })
}

/// Gradient from sensitivities:
/// g_i = Σ_k τ β_Q (φ^k − φ_Q^k)ᵀ M Φ_i^k + β_Ω (φ^K − φ_Ω)ᵀ M Φ_i^K
///     + β_i (u_i − u_{d,i}).
pub fn gradient_sensitivity(
    traj: &Trajectory,
    sens: &[SensTrajectory; 3],
    data: &DesiredStates,
    weights: &ObjectiveWeights,
    params: &Params,
) -> Result<[f64; 3]> {
    let k_steps = traj.step_count();
    if data.step_count() != k_steps {
        return Err(Error::invalid(format!(
            "observation count {} does not match step count {k_steps}",
            data.step_count()
        )));
    }
    let ops = FemOps::new(traj.meshes[0].clone());
    let mut g = [0.0f64; 3];
    for k in 1..=k_steps {
        let obs = data_on_mesh(data, &data.phi_q[k - 1], &traj.meshes[k])?;
        let resid: Vec<f64> = traj.states[k]
            .phi
            .values()
            .iter()
            .zip(obs.values())
            .map(|(&a, &b)| a - b)
            .collect();
        let m_r = ops.mass.matvec(&resid);
        for i in 0..3 {
            let dot: f64 = m_r
                .iter()
                .zip(sens[i].phi_dot[k].values())
                .map(|(&a, &b)| a * b)
                .sum();
            g[i] += traj.tau * weights.beta_q * dot;
        }
    }
    if weights.beta_omega > 0.0 {
        let obs = data_on_mesh(data, &data.phi_omega, &traj.meshes[k_steps])?;
        let resid: Vec<f64> = traj.states[k_steps]
            .phi
            .values()
            .iter()
            .zip(obs.values())
            .map(|(&a, &b)| a - b)
            .collect();
        let m_r = ops.mass.matvec(&resid);
        for i in 0..3 {
            let dot: f64 = m_r
                .iter()
                .zip(sens[i].phi_dot[k_steps].values())
                .map(|(&a, &b)| a * b)
                .sum();
            g[i] += weights.beta_omega * dot;
        }
    }
    let u = params.as_array();
    let t = weights.target.as_array();
    let b = weights.reg_weights();
    for i in 0..3 {
        g[i] += b[i] * (u[i] - t[i]);
    }
    Ok(g)
}

/// Gradient from the adjoint trajectory. The signs come from the
/// transpose of the implemented scheme:
/// ∂J/∂P =  Σ_k τ p^kᵀ M (f(φ^{k-1}) g(σ^k)) + β_P (P − P_d)
/// ∂J/∂χ = −Σ_k τ p^kᵀ K_m σ^k               + β_χ (χ − χ_d)
/// ∂J/∂C = −Σ_k τ r^kᵀ M_h σ^k               + β_C (C − C_d).
pub fn gradient_adjoint(
    traj: &Trajectory,
    cfg: &ModelConfig,
    adj: &AdjTrajectory,
    params: &Params,
    weights: &ObjectiveWeights,
) -> Result<[f64; 3]> {
    require_frozen(traj)?;
    let k_steps = traj.step_count();
    if adj.p.len() != k_steps {
        return Err(Error::invalid(format!(
            "adjoint has {} steps, trajectory has {k_steps}",
            adj.p.len()
        )));
    }
    let ops = FemOps::new(traj.meshes[0].clone());
    let tau = traj.tau;
    let mut g = [0.0f64; 3];
    for k in 1..=k_steps {
        let phi_prev = traj.states[k - 1].phi.values();
        let sigma_now = traj.states[k].sigma.values();
        let p_k = adj.p[k - 1].values();
        let r_k = adj.r[k - 1].values();

        let fg: Vec<f64> = phi_prev
            .iter()
            .zip(sigma_now)
            .map(|(&p, &s)| model::f_interface(p) * model::g_cutoff(s, cfg))
            .collect();
        g[0] += tau * ops.mass.quad_form(p_k, &fg);

        let m_w: Vec<f64> = phi_prev.iter().map(|&x| model::mobility(x, cfg)).collect();
        let k_m = fem::assemble_weighted_stiffness_signed(&ops.mesh, &m_w);
        g[1] -= tau * k_m.quad_form(p_k, sigma_now);

        let h_w: Vec<f64> = phi_prev.iter().map(|&x| model::h_tumour(x)).collect();
        let m_h = fem::assemble_weighted_mass(&ops.mesh, &h_w);
        g[2] -= tau * m_h.quad_form(r_k, sigma_now);
    }
    let u = params.as_array();
    let t = weights.target.as_array();
    let b = weights.reg_weights();
    for i in 0..3 {
        g[i] += b[i] * (u[i] - t[i]);
    }
    Ok(g)
}
