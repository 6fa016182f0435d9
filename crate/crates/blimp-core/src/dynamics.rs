//! Hybrid equations of motion and trajectory rollout.
//!
//! The vehicle state is x = [η; ν]. Its derivative assembles the rigid-body
//! terms with an aerodynamic wrench that blends the two regime models:
//!
//!   (M_RB + M_A) ν̇ = τ + (1−λ) F_ACM + λ F_GDM + F̄ − (C_RB + C_A) ν − g(η)
//!
//! λ ∈ [0,1] weights the damping (GDM) model against the coefficient (ACM)
//! model and may be a constant, a hard switch, a fixed sigmoid, or the
//! learned network from [`crate::mixer`].

use crate::aero::{acm_wrench, gdm_wrench};
use crate::mathcore::{
    flow_state, jacobian, rk4_step, EulerAngles, FlowState, MathError, Vec3, Vec6,
};
use crate::mixer::MixerParams;
use crate::rigidbody::{
    added_mass_terms, control_wrench, coriolis_matrix, gondola_reaction, gravity_buoyancy,
    mass_matrix, ControlInput, PhysicalParams, Wrench,
};
use nalgebra::{Cholesky, Const, SVector};
use thiserror::Error;

/// Condition-number ceiling for the 6×6 mass system.
pub const MASS_COND_LIMIT: f64 = 1e12;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error(transparent)]
    Math(#[from] MathError),
    #[error("mass matrix is numerically singular (condition number {cond:.3e})")]
    SingularMass { cond: f64 },
    #[error("state became non-finite at step {step}")]
    NonFiniteState { step: usize },
    #[error("neural mixing requested without mixer parameters")]
    MissingMixer,
    #[error("mixing mode requires a regime partition")]
    MissingPartition,
    #[error("invalid regime partition: {0}")]
    BadPartition(String),
}

/// Pose η = (x, y, z, φ, θ, ψ) and body velocity ν = (u, v, w, p, q, r).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateVector {
    pub eta: Vec6,
    pub nu: Vec6,
}

impl StateVector {
    pub fn new(eta: Vec6, nu: Vec6) -> Self {
        Self { eta, nu }
    }

    pub fn zero() -> Self {
        Self { eta: Vec6::zeros(), nu: Vec6::zeros() }
    }

    pub fn svector(&self) -> SVector<f64, 12> {
        SVector::from_fn(|i, _| if i < 6 { self.eta[i] } else { self.nu[i - 6] })
    }

    pub fn from_svector(v: &SVector<f64, 12>) -> Self {
        Self {
            eta: Vec6::from_fn(|i, _| v[i]),
            nu: Vec6::from_fn(|i, _| v[i + 6]),
        }
    }

    pub fn position(&self) -> Vec3 {
        Vec3::new(self.eta[0], self.eta[1], self.eta[2])
    }

    pub fn euler(&self) -> EulerAngles {
        EulerAngles::new(self.eta[3], self.eta[4], self.eta[5])
    }

    pub fn linear_velocity(&self) -> Vec3 {
        Vec3::new(self.nu[0], self.nu[1], self.nu[2])
    }

    /// Angle of attack, sideslip, and airspeed of the current body velocity.
    pub fn flow(&self) -> FlowState {
        flow_state(&self.linear_velocity())
    }

    pub fn is_finite(&self) -> bool {
        self.eta.iter().chain(self.nu.iter()).all(|x| x.is_finite())
    }
}

/// Aerodynamic regime of an (α, V) point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Acm,
    Transition,
    Gdm,
}

/// Band edges (α₁, α₂, V₁, V₂) around the critical switching point (α*, V*).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegimePartition {
    pub alpha1: f64,
    pub alpha2: f64,
    pub v1: f64,
    pub v2: f64,
    pub alpha_star: f64,
    pub v_star: f64,
}

impl RegimePartition {
    /// Band edges at ±20% of the critical points.
    pub fn from_stars(alpha_star: f64, v_star: f64) -> Self {
        Self {
            alpha1: 0.8 * alpha_star,
            alpha2: 1.2 * alpha_star,
            v1: 0.8 * v_star,
            v2: 1.2 * v_star,
            alpha_star,
            v_star,
        }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let ok = 0.0 < self.alpha1
            && self.alpha1 < self.alpha_star
            && self.alpha_star < self.alpha2
            && 0.0 < self.v1
            && self.v1 < self.v_star
            && self.v_star < self.v2
            && [self.alpha1, self.alpha2, self.v1, self.v2].iter().all(|x| x.is_finite());
        if ok {
            Ok(())
        } else {
            Err(DynamicsError::BadPartition(format!("{self:?}")))
        }
    }
}

/// How λ is chosen during rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixingMode {
    /// λ ≡ 0: coefficient model everywhere.
    AcmOnly,
    /// λ ≡ 1: damping model everywhere.
    GdmOnly,
    /// Binary switch at the critical point: λ = 0 iff α < α* and V > V*.
    Hard,
    /// Fixed analytic sigmoid surface over (α, V).
    SigmoidFixed,
    /// Learned network λ(α, V; ξ).
    Neural,
}

/// ACM region is the corner of small α and high V; the transition band is
/// L-shaped around it; everything else is GDM. Band edges belong to the
/// transition region.
pub fn classify_regime(part: &RegimePartition, f: &FlowState) -> Regime {
    let (a, v) = (f.alpha, f.speed);
    if a < part.alpha1 && v > part.v2 {
        Regime::Acm
    } else if (a < part.alpha1 && v >= part.v1 && v <= part.v2)
        || (a >= part.alpha1 && a <= part.alpha2 && v > part.v1)
    {
        Regime::Transition
    } else {
        Regime::Gdm
    }
}

/// Smooth baseline λ surface: 1 − (1 − σ((α−α*)/s_α)) · σ((V−V*)/s_V) with
/// widths s = quarter band width. Saturates to 0 deep in ACM and to 1 deep
/// in GDM along both axes; equals 0.75 at the critical point.
pub fn fixed_sigmoid_lambda(part: &RegimePartition, f: &FlowState) -> f64 {
    let sig = |x: f64| {
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    };
    let s_alpha = (part.alpha2 - part.alpha1) / 4.0;
    let s_v = (part.v2 - part.v1) / 4.0;
    let sa = sig((f.alpha - part.alpha_star) / s_alpha);
    let sv = sig((f.speed - part.v_star) / s_v);
    1.0 - (1.0 - sa) * sv
}

fn hard_lambda(part: &RegimePartition, f: &FlowState) -> f64 {
    if f.alpha < part.alpha_star && f.speed > part.v_star {
        0.0
    } else {
        1.0
    }
}

/// λ for one flow state under the given mode.
pub fn lambda_for(
    mode: MixingMode,
    xi: Option<&MixerParams>,
    part: Option<&RegimePartition>,
    f: &FlowState,
) -> Result<f64, DynamicsError> {
    let need_part = || part.ok_or(DynamicsError::MissingPartition);
    match mode {
        MixingMode::AcmOnly => Ok(0.0),
        MixingMode::GdmOnly => Ok(1.0),
        MixingMode::Hard => Ok(hard_lambda(need_part()?, f)),
        MixingMode::SigmoidFixed => Ok(fixed_sigmoid_lambda(need_part()?, f)),
        MixingMode::Neural => {
            need_part()?;
            let xi = xi.ok_or(DynamicsError::MissingMixer)?;
            Ok(xi.eval_flow(f))
        }
    }
}

/// Cached factorization of M_RB + M_A. The matrix depends on the gondola
/// position r̄ but not on the state, so one factorization serves a whole
/// trial with a fixed gondola.
pub struct MassFactor {
    chol: Cholesky<f64, Const<6>>,
    pub cond: f64,
    r_bar: Vec3,
}

impl MassFactor {
    pub fn new(phi: &PhysicalParams, u: &ControlInput) -> Result<Self, DynamicsError> {
        let (m_a, _) = added_mass_terms(phi, &Vec6::zeros());
        let m = mass_matrix(phi, u) + m_a;
        let eig = m.symmetric_eigenvalues();
        let max = eig.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        let min = eig.iter().fold(f64::INFINITY, |a, &b| a.min(b.abs()));
        let cond = if min > 0.0 { max / min } else { f64::INFINITY };
        if !cond.is_finite() || cond > MASS_COND_LIMIT {
            return Err(DynamicsError::SingularMass { cond });
        }
        let chol = Cholesky::new(m).ok_or(DynamicsError::SingularMass { cond })?;
        Ok(Self { chol, cond, r_bar: u.r_bar })
    }

    /// Whether this factorization is valid for the given input (the mass
    /// matrix depends on the input only through the gondola position).
    pub fn matches(&self, u: &ControlInput) -> bool {
        self.r_bar == u.r_bar
    }

    pub fn solve(&self, rhs: &Vec6) -> Vec6 {
        self.chol.solve(rhs)
    }
}

/// Aerodynamic wrench at mixing weight λ. At the exact endpoints only the
/// corresponding single model is evaluated, so λ = 0 and λ = 1 reproduce the
/// pure-model derivatives bitwise.
fn mixed_aero(phi: &PhysicalParams, nu: &Vec6, lam: f64) -> Wrench {
    if lam == 0.0 {
        acm_wrench(&phi.acm, nu)
    } else if lam == 1.0 {
        gdm_wrench(&phi.gdm, nu)
    } else {
        let f_acm = acm_wrench(&phi.acm, nu).vector();
        let f_gdm = gdm_wrench(&phi.gdm, nu).vector();
        Wrench::from_vector(&((1.0 - lam) * f_acm + lam * f_gdm))
    }
}

fn assemble(
    x: &StateVector,
    u: &ControlInput,
    phi: &PhysicalParams,
    factor: &MassFactor,
    aero: &Wrench,
) -> Result<SVector<f64, 12>, DynamicsError> {
    let e = x.euler();
    let j = jacobian(&e)?;
    let eta_dot = j * x.nu;
    let (_, c_a) = added_mass_terms(phi, &x.nu);
    let c = coriolis_matrix(phi, u, &x.nu) + c_a;
    let rhs = control_wrench(phi, u).vector() + aero.vector()
        + gondola_reaction(phi, u, &x.nu).vector()
        - c * x.nu
        - gravity_buoyancy(phi, u, &e).vector();
    let nu_dot = factor.solve(&rhs);
    Ok(SVector::from_fn(|i, _| if i < 6 { eta_dot[i] } else { nu_dot[i - 6] }))
}

/// Full hybrid state derivative at mixing weight λ.
pub fn hybrid_derivative(
    x: &StateVector,
    u: &ControlInput,
    phi: &PhysicalParams,
    lam: f64,
) -> Result<SVector<f64, 12>, DynamicsError> {
    let factor = MassFactor::new(phi, u)?;
    derivative_with_factor(x, u, phi, &factor, lam)
}

/// As [`hybrid_derivative`] but reusing a mass factorization.
pub fn derivative_with_factor(
    x: &StateVector,
    u: &ControlInput,
    phi: &PhysicalParams,
    factor: &MassFactor,
    lam: f64,
) -> Result<SVector<f64, 12>, DynamicsError> {
    assemble(x, u, phi, factor, &mixed_aero(phi, &x.nu, lam))
}

/// One RK4 step with λ frozen across the four stages.
pub fn step_with_lambda(
    x: &StateVector,
    u: &ControlInput,
    phi: &PhysicalParams,
    factor: &MassFactor,
    lam: f64,
    dt: f64,
) -> Result<StateVector, DynamicsError> {
    let next = rk4_step(
        |s: &SVector<f64, 12>| {
            derivative_with_factor(&StateVector::from_svector(s), u, phi, factor, lam)
        },
        &x.svector(),
        dt,
    )?;
    Ok(StateVector::from_svector(&next))
}

/// Rollout options beyond the common defaults.
#[derive(Debug, Clone, Copy)]
pub struct RolloutOpts {
    pub dt: f64,
    /// Re-evaluate λ at each RK4 stage instead of holding the step-start
    /// value. Off by default; kept for sensitivity studies.
    pub lambda_per_stage: bool,
}

impl RolloutOpts {
    pub fn new(dt: f64) -> Self {
        Self { dt, lambda_per_stage: false }
    }
}

/// Integrate the hybrid dynamics under one control sequence. Returns the
/// state at every step boundary: `inputs.len() + 1` entries starting at x0.
/// λ comes from the instantaneous flow at each step start.
pub fn rollout(
    x0: &StateVector,
    inputs: &[ControlInput],
    phi: &PhysicalParams,
    mode: MixingMode,
    xi: Option<&MixerParams>,
    part: Option<&RegimePartition>,
    dt: f64,
) -> Result<Vec<StateVector>, DynamicsError> {
    rollout_opts(x0, inputs, phi, mode, xi, part, &RolloutOpts::new(dt))
}

pub fn rollout_opts(
    x0: &StateVector,
    inputs: &[ControlInput],
    phi: &PhysicalParams,
    mode: MixingMode,
    xi: Option<&MixerParams>,
    part: Option<&RegimePartition>,
    opts: &RolloutOpts,
) -> Result<Vec<StateVector>, DynamicsError> {
    assert!(opts.dt > 0.0, "rollout requires dt > 0");
    if let Some(p) = part {
        p.validate()?;
    }
    let mut traj = Vec::with_capacity(inputs.len() + 1);
    traj.push(*x0);
    let mut x = *x0;
    let mut factor: Option<MassFactor> = None;
    for (step, u) in inputs.iter().enumerate() {
        if !factor.as_ref().is_some_and(|f| f.matches(u)) {
            factor = Some(MassFactor::new(phi, u)?);
        }
        let fac = factor.as_ref().unwrap();
        let next = if opts.lambda_per_stage {
            rk4_step(
                |s: &SVector<f64, 12>| {
                    let xs = StateVector::from_svector(s);
                    let lam = lambda_for(mode, xi, part, &xs.flow())?;
                    derivative_with_factor(&xs, u, phi, fac, lam)
                },
                &x.svector(),
                opts.dt,
            )
            .map(|v| StateVector::from_svector(&v))
        } else {
            let lam = lambda_for(mode, xi, part, &x.flow())?;
            step_with_lambda(&x, u, phi, fac, lam, opts.dt)
        };
        let next = match next {
            Ok(n) => n,
            Err(DynamicsError::Math(MathError::NonFiniteRk4Stage { .. })) => {
                return Err(DynamicsError::NonFiniteState { step })
            }
            Err(e) => return Err(e),
        };
        if !next.is_finite() {
            return Err(DynamicsError::NonFiniteState { step });
        }
        traj.push(next);
        x = next;
    }
    Ok(traj)
}
