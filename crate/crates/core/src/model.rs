//! Scalar model ingredients: growth/consumption indicator functions,
//! nutrient cut-off, nearly-degenerate mobility, the relaxed
//! double-obstacle potential and the initial data.

use crate::error::{Error, Result};

use std::f64::consts::PI;

/// Fixed scalar parameters of the phase-field model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    /// Interface width ε.
    pub eps: f64,
    /// Surface-tension scale β.
    pub beta: f64,
    /// Obstacle penalty s.
    pub s: f64,
    /// Regularization width ρ of the obstacle terms.
    pub rho: f64,
    /// Cap M on nutrient available for proliferation.
    pub m_cap: f64,
    /// Blend width θ of the nutrient cut-off.
    pub theta_g: f64,
    /// Mobility floor.
    pub m0: f64,
    /// Mobility ceiling.
    pub m1: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            eps: 0.05,
            beta: 0.05,
            s: 1e4,
            rho: 1e-3,
            m_cap: 10.0,
            theta_g: 0.01,
            m0: 1e-4,
            m1: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.beta > 0.0 && self.rho > 0.0) {
            return Err(Error::invalid("eps, beta and rho must be positive"));
        }
        if !(self.s > 1.0) {
            return Err(Error::invalid("obstacle penalty s must exceed 1"));
        }
        if !(self.theta_g > 0.0 && self.theta_g < self.m_cap / 2.0) {
            return Err(Error::invalid(
                "cut-off blend width must satisfy 0 < theta_g < m_cap/2",
            ));
        }
        if !(self.m0 > 0.0 && self.m0 <= self.m1) {
            return Err(Error::invalid("mobility bounds must satisfy 0 < m0 <= m1"));
        }
        Ok(())
    }
}

#[inline]
fn clamp_unit(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

/// Smooth indicator of the growing front: 1 at the interface centre,
/// 0 in both pure phases, constant outside [-1, 1].
pub fn f_interface(x: f64) -> f64 {
    0.5 * ((PI * clamp_unit(x)).cos() + 1.0)
}

pub fn f_interface_deriv(x: f64) -> f64 {
    if x.abs() >= 1.0 {
        0.0
    } else {
        -0.5 * PI * (PI * x).sin()
    }
}

/// C¹ nutrient cut-off: zero below 0, identity on the bulk of [0, M],
/// capped at M, with cubic blends of width `theta_g` at both ends.
pub fn g_cutoff(x: f64, cfg: &ModelConfig) -> f64 {
    let th = cfg.theta_g;
    let m = cfg.m_cap;
    if x <= 0.0 {
        0.0
    } else if x < th {
        x * x * (-x / (th * th) + 2.0 / th)
    } else if x <= m - th {
        x
    } else if x < m {
        let y = x - m;
        -y * y * y / (th * th) - 2.0 * y * y / th + m
    } else {
        m
    }
}

pub fn g_cutoff_deriv(x: f64, cfg: &ModelConfig) -> f64 {
    let th = cfg.theta_g;
    let m = cfg.m_cap;
    if x <= 0.0 {
        0.0
    } else if x < th {
        -3.0 * x * x / (th * th) + 4.0 * x / th
    } else if x <= m - th {
        1.0
    } else if x < m {
        let y = x - m;
        -3.0 * y * y / (th * th) - 4.0 * y / th
    } else {
        0.0
    }
}

/// Smooth indicator of the tumour region: 0 in the host phase, 1 in the
/// tumour phase.
pub fn h_tumour(x: f64) -> f64 {
    0.5 * ((0.5 * PI * clamp_unit(x)).sin() + 1.0)
}

pub fn h_tumour_deriv(x: f64) -> f64 {
    if x.abs() >= 1.0 {
        0.0
    } else {
        0.25 * PI * (0.5 * PI * x).cos()
    }
}

/// Mobility, nearly degenerate in the pure phases.
pub fn mobility(x: f64, cfg: &ModelConfig) -> f64 {
    (cfg.m1 - cfg.m0) * f_interface(x) + cfg.m0
}

pub fn mobility_deriv(x: f64, cfg: &ModelConfig) -> f64 {
    (cfg.m1 - cfg.m0) * f_interface_deriv(x)
}

/// Regularized `max(0, y)`: C¹ quadratic blend of width `rho`.
fn max_rho(y: f64, rho: f64) -> f64 {
    if y <= 0.0 {
        0.0
    } else if y < rho {
        y * y / (2.0 * rho)
    } else {
        y - 0.5 * rho
    }
}

fn max_rho_deriv(y: f64, rho: f64) -> f64 {
    if y <= 0.0 {
        0.0
    } else if y < rho {
        y / rho
    } else {
        1.0
    }
}

/// Obstacle violation measure λ_ρ(x) = max_ρ(0, x-1) + min_ρ(0, x+1)
/// and its derivative. Odd, identically zero on the admissible band.
pub fn lambda_rho(x: f64, rho: f64) -> Result<(f64, f64)> {
    if rho <= 0.0 {
        return Err(Error::invalid(format!(
            "regularization width must be positive, got {rho}"
        )));
    }
    // min_ρ(0, y) = -max_ρ(0, -y), so d/dy min_ρ(0, y) = max_ρ'(0, -y).
    let value = max_rho(x - 1.0, rho) - max_rho(-(x + 1.0), rho);
    let deriv = max_rho_deriv(x - 1.0, rho) + max_rho_deriv(-(x + 1.0), rho);
    Ok((value, deriv))
}

/// Antiderivative Λ_ρ of λ_ρ with Λ_ρ(0) = 0, exposed for energy
/// diagnostics.
pub fn lambda_rho_antideriv(x: f64, rho: f64) -> Result<f64> {
    if rho <= 0.0 {
        return Err(Error::invalid(format!(
            "regularization width must be positive, got {rho}"
        )));
    }
    let primitive = |y: f64| -> f64 {
        if y <= 0.0 {
            0.0
        } else if y < rho {
            y * y * y / (6.0 * rho)
        } else {
            0.5 * (y - 0.5 * rho) * (y - 0.5 * rho) + rho * rho / 24.0
        }
    };
    Ok(primitive(x - 1.0) + primitive(-(x + 1.0)))
}

/// First and second derivative of the relaxed double-obstacle potential
/// Ψ = ½(1 - x²) + (s/2)·Λ_ρ(x):
/// Ψ'(x) = -x + (s/2)λ_ρ(x), Ψ''(x) = -1 + (s/2)λ_ρ'(x).
pub fn psi_derivs(x: f64, cfg: &ModelConfig) -> (f64, f64) {
    let (lam, dlam) = lambda_rho(x, cfg.rho).expect("validated config has rho > 0");
    (-x + 0.5 * cfg.s * lam, -1.0 + 0.5 * cfg.s * dlam)
}

/// Sign convention for the initial phase field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    /// Tumour phase ≈ +1 inside the seed region (default).
    InsidePositive,
    /// The profile exactly as printed, ≈ -1 inside the seed region.
    Verbatim,
}

/// One-dimensional equilibrium profile of the relaxed potential:
/// sinusoidal through the interface, exponentially saturating to
/// s/(s-1) beyond the matching point z0 = arctan(√(s-1)); extended as
/// an odd function.
pub fn initial_profile(z: f64, s: f64) -> f64 {
    if z < 0.0 {
        return -initial_profile(-z, s);
    }
    let root = (s - 1.0).sqrt();
    let z0 = root.atan();
    if z <= z0 {
        (s / (s - 1.0)).sqrt() * z.sin()
    } else {
        (s - (root * (z0 - z)).exp()) / (s - 1.0)
    }
}

/// Initial phase field: the 1D profile across the level sets of the
/// l⁸-distance to the unit ball, i.e. a rounded square seed of
/// interface width ~ε centred at the origin.
pub fn initial_phi(x: [f64; 2], cfg: &ModelConfig, orientation: Orientation) -> f64 {
    let r8 = (x[0].abs().powi(8) + x[1].abs().powi(8)).powf(0.125);
    let arg = (r8 - 1.0) / cfg.eps;
    match orientation {
        Orientation::Verbatim => initial_profile(arg, cfg.s),
        Orientation::InsidePositive => initial_profile(-arg, cfg.s),
    }
}

/// Initial nutrient: uniformly 1.
pub fn initial_sigma(_x: [f64; 2]) -> f64 {
    1.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig::default()
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        assert!(ModelConfig { eps: 0.0, ..cfg() }.validate().is_err());
        assert!(ModelConfig { s: 1.0, ..cfg() }.validate().is_err());
        assert!(ModelConfig { theta_g: 6.0, ..cfg() }.validate().is_err());
        assert!(ModelConfig { m0: 2.0, ..cfg() }.validate().is_err());
    }

    #[test]
    fn f_values() {
        assert!(f_interface(1.0).abs() < 1e-15);
        assert!(f_interface(-1.0).abs() < 1e-15);
        assert!((f_interface(0.0) - 1.0).abs() < 1e-15);
        assert_eq!(f_interface(3.0), f_interface(1.0));
    }

    #[test]
    fn g_branch_values() {
        let c = cfg();
        assert_eq!(g_cutoff(-1.0, &c), 0.0);
        assert!((g_cutoff(5.0, &c) - 5.0).abs() < 1e-15);
        assert!((g_cutoff(20.0, &c) - 10.0).abs() < 1e-15);
        let th = c.theta_g;
        assert!((g_cutoff(th, &c) - th).abs() < 1e-15);
        assert!((g_cutoff_deriv(th, &c) - 1.0).abs() < 1e-12);
        let m = c.m_cap;
        assert!((g_cutoff(m - th, &c) - (m - th)).abs() < 1e-12);
        assert!((g_cutoff(m, &c) - m).abs() < 1e-12);
    }

    #[test]
    fn g_is_c1_at_breakpoints() {
        // Second-order one-sided differences from each side against the
        // matching one-sided analytic derivative, plus agreement of the
        // two analytic one-sided derivatives.
        let c = cfg();
        let h = 1e-6;
        for x in [0.0, c.theta_g, c.m_cap - c.theta_g, c.m_cap] {
            let right =
                (-3.0 * g_cutoff(x, &c) + 4.0 * g_cutoff(x + h, &c) - g_cutoff(x + 2.0 * h, &c))
                    / (2.0 * h);
            let left =
                (3.0 * g_cutoff(x, &c) - 4.0 * g_cutoff(x - h, &c) + g_cutoff(x - 2.0 * h, &c))
                    / (2.0 * h);
            let d_right = g_cutoff_deriv(x + 1e-13, &c);
            let d_left = g_cutoff_deriv(x - 1e-13, &c);
            assert!(
                (right - d_right).abs() < 1e-6,
                "x={x}: right fd {right} vs analytic {d_right}"
            );
            assert!(
                (left - d_left).abs() < 1e-6,
                "x={x}: left fd {left} vs analytic {d_left}"
            );
            assert!(
                (d_right - d_left).abs() < 1e-6,
                "x={x}: one-sided analytic derivatives disagree"
            );
        }
    }

    #[test]
    fn g_nondecreasing() {
        let c = cfg();
        let mut prev = g_cutoff(-2.0, &c);
        let mut x = -2.0;
        while x < 12.0 {
            x += 0.001;
            let v = g_cutoff(x, &c);
            assert!(v >= prev - 1e-14, "g not monotone near {x}");
            prev = v;
        }
    }

    #[test]
    fn h_values() {
        assert!((h_tumour(1.0) - 1.0).abs() < 1e-15);
        assert!(h_tumour(-1.0).abs() < 1e-15);
        assert!((h_tumour(0.0) - 0.5).abs() < 1e-15);
        assert_eq!(h_tumour(-2.0), h_tumour(-1.0));
    }

    #[test]
    fn mobility_bounds() {
        let c = cfg();
        assert!((mobility(1.0, &c) - 1e-4).abs() < 1e-18);
        assert!((mobility(-1.0, &c) - 1e-4).abs() < 1e-18);
        assert!((mobility(0.0, &c) - 1.0).abs() < 1e-15);
        let mut state = 99u64;
        for _ in 0..100_000 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            let x = ((state >> 11) as f64) / ((1u64 << 53) as f64) * 8.0 - 4.0;
            let m = mobility(x, &c);
            assert!((c.m0..=c.m1).contains(&m));
            let fv = f_interface(x);
            assert!((0.0..=1.0).contains(&fv));
            let hv = h_tumour(x);
            assert!((0.0..=1.0).contains(&hv));
        }
    }

    #[test]
    fn lambda_values_and_oddness() {
        let rho = 1e-3;
        let (l0, d0) = lambda_rho(0.0, rho).unwrap();
        assert_eq!(l0, 0.0);
        assert_eq!(d0, 0.0);
        let (l2, _) = lambda_rho(2.0, rho).unwrap();
        assert!((l2 - (1.0 - rho / 2.0)).abs() < 1e-15);
        for x in [0.3, 0.99, 1.0005, 1.5, 3.0, 10.0] {
            let (lp, _) = lambda_rho(x, rho).unwrap();
            let (ln, _) = lambda_rho(-x, rho).unwrap();
            assert!((lp + ln).abs() < 1e-15, "odd symmetry at {x}");
        }
        assert!(lambda_rho(1.0, 0.0).is_err());
    }

    #[test]
    fn lambda_antideriv_consistent() {
        let rho = 1e-3;
        // Central differences of the antiderivative recover λ_ρ.
        for x in [-2.0, -1.0005, 0.5, 1.0002, 1.5, 4.0] {
            let h = 1e-6;
            let num = (lambda_rho_antideriv(x + h, rho).unwrap()
                - lambda_rho_antideriv(x - h, rho).unwrap())
                / (2.0 * h);
            let (lam, _) = lambda_rho(x, rho).unwrap();
            assert!((num - lam).abs() < 1e-6, "x={x}");
        }
        assert_eq!(lambda_rho_antideriv(0.0, rho).unwrap(), 0.0);
    }

    #[test]
    fn psi_values() {
        let c = cfg();
        let (p0, p2_0) = psi_derivs(0.0, &c);
        assert_eq!(p0, 0.0);
        assert_eq!(p2_0, -1.0);
        let (p, _) = psi_derivs(1.01, &c);
        assert!(p > 0.0, "Ψ'(1.01) = {p}");
        for x in [0.2, 0.9, 1.001, 1.2, 5.0] {
            let (pp, _) = psi_derivs(x, &c);
            let (pn, _) = psi_derivs(-x, &c);
            assert!((pp + pn).abs() < 1e-12, "Ψ' odd at {x}");
        }
    }

    #[test]
    fn psi_second_matches_finite_differences() {
        let c = cfg();
        // Away from the smoothing-zone edges {±1, ±(1+ρ)}.
        for x in [0.0, 0.5, 0.9995, 1.0005, 1.002, 2.0, -1.5] {
            let h = 1e-7;
            let (pp, _) = psi_derivs(x + h, &c);
            let (pm, _) = psi_derivs(x - h, &c);
            let num = (pp - pm) / (2.0 * h);
            let (_, p2) = psi_derivs(x, &c);
            let denom = p2.abs().max(1.0);
            assert!(
                ((num - p2) / denom).abs() < 1e-5,
                "x={x}: fd {num} vs analytic {p2}"
            );
        }
    }

    #[test]
    fn initial_profile_continuity_and_limits() {
        let s = 1e4;
        let z0 = (s - 1.0f64).sqrt().atan();
        // Continuity at z0 and value 1 there.
        let below = initial_profile(z0 - 1e-13, s);
        let above = initial_profile(z0 + 1e-13, s);
        assert!((below - 1.0).abs() < 1e-10);
        assert!((above - 1.0).abs() < 1e-10);
        assert!((initial_profile(z0, s) - 1.0).abs() < 1e-12);
        // Odd and continuous at 0.
        assert_eq!(initial_profile(0.0, s), 0.0);
        assert!((initial_profile(1e-14, s) + initial_profile(-1e-14, s)).abs() < 1e-25);
        // Far field saturates at s/(s-1).
        let far = initial_profile(50.0, s);
        assert!((far - s / (s - 1.0)).abs() < 1e-12);
        for z in [0.1, 0.9, 2.0, 7.0] {
            assert!(
                (initial_profile(z, s) + initial_profile(-z, s)).abs() < 1e-15,
                "odd at {z}"
            );
        }
    }

    #[test]
    fn initial_phi_orientations() {
        let c = cfg();
        // On the l8 unit sphere the profile argument is 0.
        let p = [1.0, 0.0];
        assert_eq!(initial_phi(p, &c, Orientation::Verbatim), 0.0);
        assert_eq!(initial_phi(p, &c, Orientation::InsidePositive), 0.0);
        // Centre: verbatim ≈ -s/(s-1), inside-positive ≈ +s/(s-1).
        let centre = [0.0, 0.0];
        let v = initial_phi(centre, &c, Orientation::Verbatim);
        let ip = initial_phi(centre, &c, Orientation::InsidePositive);
        assert!(v < -0.999);
        assert!(ip > 0.999);
        assert!((v + ip).abs() < 1e-15);
        // Bounded by s/(s-1).
        let bound = c.s / (c.s - 1.0) + 1e-12;
        for xy in [[0.0, 0.0], [0.5, 0.5], [1.5, 0.2], [4.0, 4.0]] {
            assert!(initial_phi(xy, &c, Orientation::InsidePositive).abs() <= bound);
        }
    }

    #[test]
    fn initial_sigma_is_one() {
        assert_eq!(initial_sigma([0.3, -4.0]), 1.0);
        assert_eq!(initial_sigma([123.0, 7.0]), 1.0);
    }
}
