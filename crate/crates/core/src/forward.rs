//! Semi-implicit time stepping for the coupled phase-field /
//! chemical-potential / nutrient system.
//!
//! Each step first solves the linear nutrient equation (it decouples
//! from the rest of the step), then the coupled Cahn-Hilliard block by
//! Newton's method. The mobility, the growth indicator and the nutrient
//! consumption indicator are all evaluated at the previous phase field,
//! so the only nonlinearity inside a step is the lumped potential term.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fem::{self, NodalField};
use crate::linalg::{self, BandLu, BandMatrix, Ordering, SparseOperator};
use crate::mesh::{self, Mesh, RefinePolicy, TransferMode};
use crate::model::{self, ModelConfig, Orientation};

/// The three scalar controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Params {
    /// Proliferation rate P.
    pub proliferation: f64,
    /// Chemotaxis coefficient χ.
    pub chemotaxis: f64,
    /// Nutrient consumption rate C.
    pub consumption: f64,
}

impl Params {
    pub fn new(proliferation: f64, chemotaxis: f64, consumption: f64) -> Self {
        Params {
            proliferation,
            chemotaxis,
            consumption,
        }
    }

    pub fn zero() -> Self {
        Params::new(0.0, 0.0, 0.0)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.proliferation, self.chemotaxis, self.consumption]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Params::new(a[0], a[1], a[2])
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("proliferation", self.proliferation),
            ("chemotaxis", self.chemotaxis),
            ("consumption", self.consumption),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!(
                    "parameter {name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Box constraints 0 ≤ P ≤ P∞, 0 ≤ χ ≤ χ∞, 0 ≤ C ≤ C∞.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmissibleBox {
    pub p_max: f64,
    pub chi_max: f64,
    pub c_max: f64,
}

impl AdmissibleBox {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_max > 0.0 && self.chi_max > 0.0 && self.c_max > 0.0) {
            return Err(Error::invalid("admissible bounds must be positive"));
        }
        Ok(())
    }

    pub fn upper(&self) -> [f64; 3] {
        [self.p_max, self.chi_max, self.c_max]
    }

    pub fn contains(&self, p: &Params) -> bool {
        let a = p.as_array();
        a.iter()
            .zip(self.upper())
            .all(|(&v, hi)| (0.0..=hi).contains(&v))
    }

    pub fn project(&self, a: [f64; 3]) -> [f64; 3] {
        let hi = self.upper();
        [
            a[0].clamp(0.0, hi[0]),
            a[1].clamp(0.0, hi[1]),
            a[2].clamp(0.0, hi[2]),
        ]
    }
}

/// The discrete solution triple at one time instance.
#[derive(Debug, Clone)]
pub struct State {
    pub phi: NodalField,
    pub mu: NodalField,
    pub sigma: NodalField,
    pub time_index: usize,
    pub time: f64,
}

/// A complete run: one state and one mesh per time index 0..=K.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<State>,
    pub meshes: Vec<Arc<Mesh>>,
    pub tau: f64,
    pub params: Params,
}

impl Trajectory {
    pub fn step_count(&self) -> usize {
        self.states.len() - 1
    }

    pub fn final_time(&self) -> f64 {
        self.states.last().map(|s| s.time).unwrap_or(0.0)
    }

    /// True when every step shares one mesh.
    pub fn mesh_frozen(&self) -> bool {
        self.meshes
            .windows(2)
            .all(|w| Arc::ptr_eq(&w[0], &w[1]))
    }
}

/// Time-stepping configuration.
#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    pub tau: f64,
    /// Number of steps K.
    pub steps: usize,
    /// Absolute Newton tolerance in the lumped-mass dual norm.
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    /// Relative residual bound for the linear solves.
    pub linear_tol: f64,
    /// Adaptive meshing; `None` keeps the mesh fixed.
    pub adapt: Option<RefinePolicy>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tau: 0.05,
            steps: 160,
            newton_tol: 1e-10,
            newton_max_iter: 30,
            linear_tol: 1e-10,
            adapt: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::invalid("tau must be positive"));
        }
        if self.steps == 0 {
            return Err(Error::invalid("step count must be at least 1"));
        }
        if !(self.newton_tol > 0.0 && self.linear_tol > 0.0) {
            return Err(Error::invalid("solver tolerances must be positive"));
        }
        if let Some(policy) = &self.adapt {
            policy.validate()?;
        }
        Ok(())
    }
}

/// Per-mesh assembled operators shared by all steps on that mesh.
pub struct FemOps {
    pub mesh: Arc<Mesh>,
    pub mass: SparseOperator,
    pub stiffness: SparseOperator,
    pub lumped: Vec<f64>,
    pub ordering: Ordering,
}

impl FemOps {
    pub fn new(mesh: Arc<Mesh>) -> Self {
        let mass = fem::assemble_mass(&mesh);
        let stiffness = fem::assemble_stiffness(&mesh);
        let lumped = fem::lumped_mass_diag(&mesh);
        let rcm = linalg::reverse_cuthill_mckee(mesh.adjacency());
        let natural = Ordering::identity(mesh.n_nodes());
        let ordering = if mass.bandwidth_under(&natural.inv) <= mass.bandwidth_under(&rcm.inv) {
            natural
        } else {
            rcm
        };
        FemOps {
            mesh,
            mass,
            stiffness,
            lumped,
            ordering,
        }
    }

    fn node_bandwidth(&self) -> usize {
        self.mass.bandwidth_under(&self.ordering.inv)
    }
}

/// Implicit nutrient step: (M + τK + τC·M_h) σ = M σ_prev with M_h the
/// mass matrix weighted by the interpolated consumption indicator.
pub fn solve_nutrient_step(
    ops: &FemOps,
    sigma_prev: &NodalField,
    phi_prev: &NodalField,
    params: &Params,
    tau: f64,
    linear_tol: f64,
) -> Result<NodalField> {
    ops.mesh.check_field(sigma_prev)?;
    ops.mesh.check_field(phi_prev)?;
    let h_w: Vec<f64> = phi_prev.values().iter().map(|&x| model::h_tumour(x)).collect();
    let m_h = fem::assemble_weighted_mass(&ops.mesh, &h_w);
    let a = SparseOperator::linear_comb(&[
        (1.0, &ops.mass),
        (tau, &ops.stiffness),
        (tau * params.consumption, &m_h),
    ]);
    let rhs = ops.mass.matvec(sigma_prev.values());
    let x = linalg::solve_csr(&a, &rhs, &ops.ordering)?;
    let rel = linalg::relative_residual(&a, &x, &rhs);
    if rel > linear_tol {
        return Err(Error::Nonconvergence {
            context: "nutrient linear solve".into(),
            residual: rel,
        });
    }
    Ok(NodalField::new(ops.mesh.generation(), x))
}

/// Lumped-mass dual norm of a stacked residual.
fn dual_norm(lumped: &[f64], f1: &[f64], f2: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..lumped.len() {
        acc += (f1[i] * f1[i] + f2[i] * f2[i]) / lumped[i];
    }
    acc.sqrt()
}

/// Two-by-two block operator in interleaved band form: row 2i is the
/// first block equation at node i, row 2i+1 the second; column 2j is
/// the first unknown at node j, column 2j+1 the second. All four blocks
/// share the mesh adjacency pattern; optional diagonals are added to
/// the off-diagonal blocks (the lumped potential-curvature term).
pub(crate) fn build_coupled_band(
    ops: &FemOps,
    a11: (f64, &SparseOperator),
    a12: (f64, &SparseOperator),
    a21: (f64, &SparseOperator),
    a22: (f64, &SparseOperator),
    diag_a12: Option<&[f64]>,
    diag_a21: Option<&[f64]>,
) -> BandMatrix {
    let n = ops.mesh.n_nodes();
    let bw = 2 * ops.node_bandwidth() + 1;
    let mut band = BandMatrix::zero(2 * n, bw, bw);
    let inv = &ops.ordering.inv;
    for i in 0..n {
        let (cols, v11) = a11.1.row(i);
        let (_, v12) = a12.1.row(i);
        let (_, v21) = a21.1.row(i);
        let (_, v22) = a22.1.row(i);
        let pi = inv[i];
        for (idx, &j) in cols.iter().enumerate() {
            let pj = inv[j];
            band.add(2 * pi, 2 * pj, a11.0 * v11[idx]);
            band.add(2 * pi, 2 * pj + 1, a12.0 * v12[idx]);
            band.add(2 * pi + 1, 2 * pj, a21.0 * v21[idx]);
            band.add(2 * pi + 1, 2 * pj + 1, a22.0 * v22[idx]);
        }
        if let Some(d) = diag_a12 {
            band.add(2 * pi, 2 * pi + 1, d[i]);
        }
        if let Some(d) = diag_a21 {
            band.add(2 * pi + 1, 2 * pi, d[i]);
        }
    }
    band
}

/// Solve an already factored interleaved 2n system for one right-hand
/// side pair; returns the two unknown blocks in mesh order.
pub(crate) fn interleaved_solve_with(
    ops: &FemOps,
    lu: &BandLu,
    r1: &[f64],
    r2: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let n = ops.mesh.n_nodes();
    let inv = &ops.ordering.inv;
    let perm = &ops.ordering.perm;
    let mut rhs = vec![0.0; 2 * n];
    for i in 0..n {
        rhs[2 * inv[i]] = r1[i];
        rhs[2 * inv[i] + 1] = r2[i];
    }
    lu.solve(&mut rhs);
    let mut x1 = vec![0.0; n];
    let mut x2 = vec![0.0; n];
    for p in 0..n {
        x1[perm[p]] = rhs[2 * p];
        x2[perm[p]] = rhs[2 * p + 1];
    }
    (x1, x2)
}

/// Factor and solve the interleaved 2n system once.
pub(crate) fn solve_interleaved(
    ops: &FemOps,
    band: BandMatrix,
    r1: &[f64],
    r2: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let lu = BandLu::factor(band)?;
    Ok(interleaved_solve_with(ops, &lu, r1, r2))
}

/// Jacobian of the coupled phase/potential block.
pub(crate) fn build_ch_jacobian(
    ops: &FemOps,
    k_m: &SparseOperator,
    tau: f64,
    beta_eps: f64,
    psi2_lumped: &[f64],
) -> BandMatrix {
    build_coupled_band(
        ops,
        (1.0, &ops.mass),
        (tau, k_m),
        (beta_eps, &ops.stiffness),
        (-1.0, &ops.mass),
        None,
        Some(psi2_lumped),
    )
}

/// Outcome of one coupled Newton solve, including the converged
/// residual for diagnostics.
pub struct ChStepResult {
    pub phi: NodalField,
    pub mu: NodalField,
    pub newton_iters: usize,
    pub residual: f64,
}

/// Newton solve of the coupled phase/potential block at one time step.
pub fn solve_ch_step_newton(
    ops: &FemOps,
    phi_prev: &NodalField,
    sigma_now: &NodalField,
    params: &Params,
    tau: f64,
    cfg: &ModelConfig,
    solver: &SolverConfig,
) -> Result<ChStepResult> {
    ops.mesh.check_field(phi_prev)?;
    ops.mesh.check_field(sigma_now)?;
    let n = ops.mesh.n_nodes();
    let beta_eps = cfg.beta * cfg.eps;
    let beta_over_eps = cfg.beta / cfg.eps;

    let m_w: Vec<f64> = phi_prev
        .values()
        .iter()
        .map(|&x| model::mobility(x, cfg))
        .collect();
    let k_m = fem::assemble_weighted_stiffness_signed(&ops.mesh, &m_w);

    // Constant right-hand side of the phase equation.
    let fg: Vec<f64> = phi_prev
        .values()
        .iter()
        .zip(sigma_now.values())
        .map(|(&p, &s)| model::f_interface(p) * model::g_cutoff(s, cfg))
        .collect();
    let source = ops.mass.matvec(&fg);
    let m_phi_prev = ops.mass.matvec(phi_prev.values());
    let km_sigma = k_m.matvec(sigma_now.values());
    let rhs1: Vec<f64> = (0..n)
        .map(|i| {
            m_phi_prev[i] + tau * params.proliferation * source[i]
                - tau * params.chemotaxis * km_sigma[i]
        })
        .collect();

    // Residuals of the two equations at (phi, mu).
    let residual = |phi: &[f64], mu: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let m_phi = ops.mass.matvec(phi);
        let km_mu = k_m.matvec(mu);
        let k_phi = ops.stiffness.matvec(phi);
        let m_mu = ops.mass.matvec(mu);
        let mut f1 = vec![0.0; n];
        let mut f2 = vec![0.0; n];
        for i in 0..n {
            f1[i] = m_phi[i] + tau * km_mu[i] - rhs1[i];
            let (psi1, _) = model::psi_derivs(phi[i], cfg);
            f2[i] = beta_eps * k_phi[i] + beta_over_eps * ops.lumped[i] * psi1 - m_mu[i];
        }
        (f1, f2)
    };

    // Start from the previous phase field with its consistent potential,
    // which zeroes the potential equation initially.
    let mut phi = phi_prev.values().to_vec();
    let mut mu = consistent_mu_values(ops, cfg, &phi)?;

    let (mut f1, mut f2) = residual(&phi, &mu);
    let mut res = dual_norm(&ops.lumped, &f1, &f2);
    let mut iters = 0;
    // The potential is piecewise linear, so the residual is allowed to
    // rise while the active set of the obstacle band settles; only a
    // persistent failure to reach a new best residual is fatal.
    let mut best_res = res;
    let mut stalled = 0usize;
    const MAX_STALLED: usize = 8;

    while res > solver.newton_tol {
        if iters >= solver.newton_max_iter {
            return Err(Error::Nonconvergence {
                context: format!("coupled Newton solve ({iters} iterations)"),
                residual: res,
            });
        }
        let psi2_lumped: Vec<f64> = (0..n)
            .map(|i| {
                let (_, psi2) = model::psi_derivs(phi[i], cfg);
                beta_over_eps * ops.lumped[i] * psi2
            })
            .collect();
        let band = build_ch_jacobian(ops, &k_m, tau, beta_eps, &psi2_lumped);
        let neg_f1: Vec<f64> = f1.iter().map(|v| -v).collect();
        let neg_f2: Vec<f64> = f2.iter().map(|v| -v).collect();
        let (dphi, dmu) = solve_interleaved(ops, band, &neg_f1, &neg_f2)?;

        // Residual-monotone backtracking: halve at most 10 times. When no
        // damped step decreases the residual the iterate is straddling a
        // kink of the obstacle band; take the full step to update the
        // active set instead of giving up.
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..=10 {
            let trial_phi: Vec<f64> = (0..n).map(|i| phi[i] + lambda * dphi[i]).collect();
            let trial_mu: Vec<f64> = (0..n).map(|i| mu[i] + lambda * dmu[i]).collect();
            let (t1, t2) = residual(&trial_phi, &trial_mu);
            let tres = dual_norm(&ops.lumped, &t1, &t2);
            if tres < res {
                phi = trial_phi;
                mu = trial_mu;
                f1 = t1;
                f2 = t2;
                res = tres;
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        if !accepted {
            for i in 0..n {
                phi[i] += dphi[i];
                mu[i] += dmu[i];
            }
            let (t1, t2) = residual(&phi, &mu);
            f1 = t1;
            f2 = t2;
            res = dual_norm(&ops.lumped, &f1, &f2);
        }
        if res < best_res {
            best_res = res;
            stalled = 0;
        } else {
            stalled += 1;
            if stalled > MAX_STALLED {
                return Err(Error::Nonconvergence {
                    context: format!("coupled Newton stalled ({stalled} steps without progress)"),
                    residual: res,
                });
            }
        }
        iters += 1;
    }

    Ok(ChStepResult {
        phi: NodalField::new(ops.mesh.generation(), phi),
        mu: NodalField::new(ops.mesh.generation(), mu),
        newton_iters: iters,
        residual: res,
    })
}

fn consistent_mu_values(ops: &FemOps, cfg: &ModelConfig, phi: &[f64]) -> Result<Vec<f64>> {
    let n = ops.mesh.n_nodes();
    let k_phi = ops.stiffness.matvec(phi);
    let mut rhs = vec![0.0; n];
    for i in 0..n {
        let (psi1, _) = model::psi_derivs(phi[i], cfg);
        rhs[i] = cfg.beta * cfg.eps * k_phi[i] + cfg.beta / cfg.eps * ops.lumped[i] * psi1;
    }
    linalg::solve_csr(&ops.mass, &rhs, &ops.ordering)
}

/// Chemical potential consistent with a given phase field (used for the
/// initial state and as the Newton starting guess).
pub fn consistent_mu(ops: &FemOps, cfg: &ModelConfig, phi: &NodalField) -> Result<NodalField> {
    ops.mesh.check_field(phi)?;
    Ok(NodalField::new(
        ops.mesh.generation(),
        consistent_mu_values(ops, cfg, phi.values())?,
    ))
}

/// One time step: optional mesh adaptation, nutrient solve, then the
/// coupled block. Returns the new state together with the operators of
/// the (possibly refreshed) mesh.
pub fn advance(
    state: &State,
    ops: FemOps,
    params: &Params,
    solver: &SolverConfig,
    cfg: &ModelConfig,
) -> Result<(State, FemOps)> {
    let mut ops = ops;
    let mut phi_prev = state.phi.clone();
    let mut sigma_prev = state.sigma.clone();

    if let Some(policy) = &solver.adapt {
        let eta = mesh::gradient_jump_indicator(&ops.mesh, [&state.phi, &state.mu, &state.sigma])?;
        let total: f64 = eta.iter().sum();
        // Indicators at the level of solver roundoff (O(1) fields leave
        // gradient-jump noise around 1e-30) must not drive refinement.
        let volumes = ops.mesh.cell_areas();
        let (refine, _coarsen) = if total > 1e-24 {
            mesh::doerfler_mark(&eta, policy, &volumes)
        } else {
            (Vec::new(), Vec::new())
        };
        if !refine.is_empty() {
            let refined = Arc::new(mesh::refine_bisect(&ops.mesh, &refine)?);
            phi_prev = mesh::transfer_nodal(
                &ops.mesh,
                &state.phi,
                &refined,
                TransferMode::LagrangeInterpolate,
            )?;
            sigma_prev = mesh::transfer_nodal(
                &ops.mesh,
                &state.sigma,
                &refined,
                TransferMode::LagrangeInterpolate,
            )?;
            ops = FemOps::new(refined);
        }
    }

    let sigma = solve_nutrient_step(
        &ops,
        &sigma_prev,
        &phi_prev,
        params,
        solver.tau,
        solver.linear_tol,
    )?;
    let ch = solve_ch_step_newton(&ops, &phi_prev, &sigma, params, solver.tau, cfg, solver)?;

    let state = State {
        phi: ch.phi,
        mu: ch.mu,
        sigma,
        time_index: state.time_index + 1,
        time: state.time + solver.tau,
    };
    Ok((state, ops))
}

/// Run the stepper for `solver.steps` steps from nodal initial data.
pub fn simulate(
    mesh: &Arc<Mesh>,
    phi0: &NodalField,
    sigma0: &NodalField,
    params: &Params,
    solver: &SolverConfig,
    cfg: &ModelConfig,
) -> Result<Trajectory> {
    params.validate()?;
    cfg.validate()?;
    mesh.check_field(phi0)?;
    mesh.check_field(sigma0)?;

    let mut ops = FemOps::new(mesh.clone());
    let mu0 = consistent_mu(&ops, cfg, phi0)?;
    let mut states = vec![State {
        phi: phi0.clone(),
        mu: mu0,
        sigma: sigma0.clone(),
        time_index: 0,
        time: 0.0,
    }];
    let mut meshes = vec![mesh.clone()];

    for k in 1..=solver.steps {
        let (next, next_ops) = advance(states.last().unwrap(), ops, params, solver, cfg)
            .map_err(|e| match e {
                Error::Nonconvergence { context, residual } => Error::Nonconvergence {
                    context: format!("step {k}: {context}"),
                    residual,
                },
                other => other,
            })?;
        ops = next_ops;
        meshes.push(ops.mesh.clone());
        states.push(next);
    }

    Ok(Trajectory {
        states,
        meshes,
        tau: solver.tau,
        params: *params,
    })
}

/// L2-projected initial fields on a mesh.
pub fn initial_fields(
    mesh: &Arc<Mesh>,
    cfg: &ModelConfig,
    orientation: Orientation,
) -> Result<(NodalField, NodalField)> {
    let phi0 = fem::project_function(mesh, |p| model::initial_phi(p, cfg, orientation))?;
    let sigma0 = fem::project_function(mesh, model::initial_sigma)?;
    Ok((phi0, sigma0))
}
