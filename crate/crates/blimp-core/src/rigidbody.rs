//! Non-aerodynamic terms of the blimp dynamics: rigid-body mass and Coriolis
//! matrices for the envelope+gondola system, gravity/buoyancy wrench, thruster
//! control wrench, moving-mass reaction wrench, and added-mass terms.
//!
//! The envelope (mass m0, inertia I0 about the CoB) and the point-mass gondola
//! (m̄ at r̄) are merged into one rigid body with total mass m = m0 + m̄ and
//! combined CoM offset r where m·r = m0·r0 + m̄·r̄. m and r are always derived,
//! never stored.

use crate::aero::{AcmCoeffs, GdmCoeffs};
use crate::mathcore::{rotation_body_to_inertial, skew, EulerAngles, Mat3, Mat6, Vec3, Vec6};
use thiserror::Error;

/// 1 gram-force in newtons; thrust table I/O only, everything else is SI.
pub const GF_TO_N: f64 = 9.80665e-3;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ParamError {
    #[error("mass {name} must be positive, got {value}")]
    NonPositiveMass { name: &'static str, value: f64 },
    #[error("inertia tensor must be symmetric positive definite")]
    BadInertia,
    #[error("added-mass entry {index} is negative: {value}")]
    NegativeAddedMass { index: usize, value: f64 },
    #[error("gravity must be positive, got {0}")]
    BadGravity(f64),
    #[error("buoyancy must be nonnegative, got {0}")]
    BadBuoyancy(f64),
    #[error("thruster offset must be nonnegative, got {0}")]
    BadThrusterOffset(f64),
    #[error("air density must be positive, got {0}")]
    BadDensity(f64),
    #[error("reference area must be positive, got {0}")]
    BadArea(f64),
    #[error("aerodynamic coefficient {name} is not finite")]
    NonFiniteCoeff { name: String },
    #[error("drag coefficient {name} is negative: {value}")]
    NegativeDrag { name: String, value: f64 },
    #[error("thrust must be nonnegative, got Fl={fl}, Fr={fr}")]
    NegativeThrust { fl: f64, fr: f64 },
}

/// Everything fixed about the vehicle: masses, inertia, buoyancy, thruster
/// geometry, added-mass diagonal, and both aerodynamic coefficient sets.
#[derive(Debug, Clone, PartialEq)]
pub struct PhysicalParams {
    /// Envelope (hull + wings) mass [kg].
    pub m0: f64,
    /// Gondola point mass m̄ [kg].
    pub m_bar: f64,
    /// Envelope inertia tensor about the CoB [kg·m²].
    pub i0: Mat3,
    /// Envelope CoM offset from the CoB [m].
    pub r0: Vec3,
    /// Net buoyant force B [N].
    pub buoyancy: f64,
    /// Gravitational acceleration [m/s²].
    pub gravity: f64,
    /// Lateral offset d of each propeller from the body x axis [m].
    pub thruster_offset: f64,
    /// Added-mass diagonal (X_u̇, Y_v̇, Z_ẇ, K_ṗ, M_q̇, N_ṙ) [kg, kg·m²].
    pub added_mass: [f64; 6],
    pub acm: AcmCoeffs,
    pub gdm: GdmCoeffs,
}

impl PhysicalParams {
    /// Plausible sub-kilogram vehicle, slightly heavy overall; the
    /// config-file defaults and shared test fixture.
    pub fn default_vehicle() -> Self {
        Self {
            m0: 0.12,
            m_bar: 0.08,
            i0: Mat3::from_diagonal(&Vec3::new(0.010, 0.008, 0.012)),
            r0: Vec3::new(0.0, 0.0, 0.01),
            buoyancy: 1.90003,
            gravity: 9.80665,
            thruster_offset: 0.05,
            added_mass: [0.05, 0.08, 0.08, 0.002, 0.003, 0.003],
            acm: AcmCoeffs::plausible(),
            gdm: GdmCoeffs::plausible(),
        }
    }

    pub fn total_mass(&self) -> f64 {
        self.m0 + self.m_bar
    }

    /// Combined CoM offset r from m·r = m0·r0 + m̄·r̄.
    pub fn com_offset(&self, r_bar: &Vec3) -> Vec3 {
        (self.m0 * self.r0 + self.m_bar * r_bar) / self.total_mass()
    }

    pub fn validate(&self) -> Result<(), ParamError> {
        if !(self.m0 > 0.0) {
            return Err(ParamError::NonPositiveMass { name: "m0", value: self.m0 });
        }
        if !(self.m_bar > 0.0) {
            return Err(ParamError::NonPositiveMass { name: "m_bar", value: self.m_bar });
        }
        let sym_err = (self.i0 - self.i0.transpose()).norm();
        let eig_min = self.i0.symmetric_eigenvalues().min();
        if !(sym_err < 1e-9 && eig_min > 0.0) {
            return Err(ParamError::BadInertia);
        }
        for (index, &value) in self.added_mass.iter().enumerate() {
            if !(value >= 0.0) {
                return Err(ParamError::NegativeAddedMass { index, value });
            }
        }
        if !(self.gravity > 0.0) {
            return Err(ParamError::BadGravity(self.gravity));
        }
        if !(self.buoyancy >= 0.0) {
            return Err(ParamError::BadBuoyancy(self.buoyancy));
        }
        if !(self.thruster_offset >= 0.0) {
            return Err(ParamError::BadThrusterOffset(self.thruster_offset));
        }
        self.acm.validate()?;
        self.gdm.validate()?;
        Ok(())
    }
}

/// Actuation state: thrusts plus gondola position and its time derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlInput {
    /// Left propeller thrust [N].
    pub fl: f64,
    /// Right propeller thrust [N].
    pub fr: f64,
    /// Gondola CoM position r̄ in the body frame [m].
    pub r_bar: Vec3,
    pub r_bar_dot: Vec3,
    pub r_bar_ddot: Vec3,
}

impl ControlInput {
    /// Input with the gondola held fixed (the identification assumption).
    pub fn steady(fl: f64, fr: f64, r_bar: Vec3) -> Self {
        Self { fl, fr, r_bar, r_bar_dot: Vec3::zeros(), r_bar_ddot: Vec3::zeros() }
    }

    pub fn validate(&self) -> Result<(), ParamError> {
        if self.fl < 0.0 || self.fr < 0.0 {
            return Err(ParamError::NegativeThrust { fl: self.fl, fr: self.fr });
        }
        Ok(())
    }
}

/// Body-frame force and moment about the CoB.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Wrench {
    pub force: Vec3,
    pub moment: Vec3,
}

impl Wrench {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn new(force: Vec3, moment: Vec3) -> Self {
        Self { force, moment }
    }

    pub fn vector(&self) -> Vec6 {
        Vec6::new(
            self.force.x,
            self.force.y,
            self.force.z,
            self.moment.x,
            self.moment.y,
            self.moment.z,
        )
    }

    pub fn from_vector(v: &Vec6) -> Self {
        Self {
            force: Vec3::new(v[0], v[1], v[2]),
            moment: Vec3::new(v[3], v[4], v[5]),
        }
    }
}

impl std::ops::Add for Wrench {
    type Output = Wrench;
    fn add(self, rhs: Wrench) -> Wrench {
        Wrench { force: self.force + rhs.force, moment: self.moment + rhs.moment }
    }
}

impl std::ops::Sub for Wrench {
    type Output = Wrench;
    fn sub(self, rhs: Wrench) -> Wrench {
        Wrench { force: self.force - rhs.force, moment: self.moment - rhs.moment }
    }
}

impl std::ops::Neg for Wrench {
    type Output = Wrench;
    fn neg(self) -> Wrench {
        Wrench { force: -self.force, moment: -self.moment }
    }
}

fn assemble_blocks(tl: &Mat3, tr: &Mat3, bl: &Mat3, br: &Mat3) -> Mat6 {
    let mut m = Mat6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(tl);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(tr);
    m.fixed_view_mut::<3, 3>(3, 0).copy_from(bl);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(br);
    m
}

/// Effective inertia about the CoB: I0 − m̄ S(r̄) S(r̄).
fn effective_inertia(p: &PhysicalParams, r_bar: &Vec3) -> Mat3 {
    let s = skew(r_bar);
    p.i0 - p.m_bar * s * s
}

/// Rigid-body mass matrix M_RB of the merged envelope+gondola body.
pub fn mass_matrix(p: &PhysicalParams, u: &ControlInput) -> Mat6 {
    let m = p.total_mass();
    let sr = skew(&p.com_offset(&u.r_bar));
    assemble_blocks(
        &Mat3::from_diagonal_element(m),
        &(-m * sr),
        &(m * sr),
        &effective_inertia(p, &u.r_bar),
    )
}

/// Rigid-body Coriolis/centripetal matrix C_RB(ν).
///
/// Both off-diagonal blocks are −m S(ω) S(r); with r = 0 the quadratic form
/// νᵀ C_RB ν vanishes identically, which is what the power-balance tests
/// check. For r ≠ 0 this form is not energy-neutral.
pub fn coriolis_matrix(p: &PhysicalParams, u: &ControlInput, nu: &Vec6) -> Mat6 {
    let m = p.total_mass();
    let omega = Vec3::new(nu[3], nu[4], nu[5]);
    let so = skew(&omega);
    let sr = skew(&p.com_offset(&u.r_bar));
    let off = -m * so * sr;
    assemble_blocks(
        &(m * so),
        &off,
        &off,
        &(-skew(&(effective_inertia(p, &u.r_bar) * omega))),
    )
}

/// Gravity/buoyancy wrench g(η): force (mg−B)Rᵀk, moment mg S(r) Rᵀk, with k
/// the inertial z unit. The hybrid dynamics subtract this term.
pub fn gravity_buoyancy(p: &PhysicalParams, u: &ControlInput, e: &EulerAngles) -> Wrench {
    let m = p.total_mass();
    let down = rotation_body_to_inertial(e).transpose() * Vec3::z();
    Wrench {
        force: (m * p.gravity - p.buoyancy) * down,
        moment: m * p.gravity * skew(&p.com_offset(&u.r_bar)) * down,
    }
}

/// Thruster wrench: total thrust along body x; pitch moment from the thrust
/// line at gondola depth r̄_z; yaw moment from differential thrust at lateral
/// offset d.
pub fn control_wrench(p: &PhysicalParams, u: &ControlInput) -> Wrench {
    let total = u.fl + u.fr;
    Wrench {
        force: Vec3::new(total, 0.0, 0.0),
        moment: Vec3::new(0.0, total * u.r_bar.z, (u.fl - u.fr) * p.thruster_offset),
    }
}

/// Moving-mass reaction wrench F̄ from gondola translation relative to the
/// body. Only the r̄̇ and r̄̈ terms appear; the ν̇ coupling is already inside
/// M_RB and the ω×(ω×r̄) term inside C_RB. Zero whenever the gondola is held
/// fixed.
pub fn gondola_reaction(p: &PhysicalParams, u: &ControlInput, nu: &Vec6) -> Wrench {
    let omega = Vec3::new(nu[3], nu[4], nu[5]);
    let force = -p.m_bar * u.r_bar_ddot + 2.0 * p.m_bar * skew(&u.r_bar_dot) * omega;
    let sr_bar = skew(&u.r_bar);
    let moment =
        -p.m_bar * sr_bar * u.r_bar_ddot + 2.0 * p.m_bar * sr_bar * skew(&u.r_bar_dot) * omega;
    Wrench { force, moment }
}

/// Added-mass matrix M_A (diagonal) and its Coriolis companion
/// C_A = [0, −S(A₁v); −S(A₁v), −S(A₂ω)], which is energy-neutral for any ν.
pub fn added_mass_terms(p: &PhysicalParams, nu: &Vec6) -> (Mat6, Mat6) {
    let a = &p.added_mass;
    let m_a = Mat6::from_diagonal(&Vec6::new(a[0], a[1], a[2], a[3], a[4], a[5]));
    let v = Vec3::new(nu[0], nu[1], nu[2]);
    let omega = Vec3::new(nu[3], nu[4], nu[5]);
    let a1v = Vec3::new(a[0] * v.x, a[1] * v.y, a[2] * v.z);
    let a2w = Vec3::new(a[3] * omega.x, a[4] * omega.y, a[5] * omega.z);
    let s1 = -skew(&a1v);
    let c_a = assemble_blocks(&Mat3::zeros(), &s1, &s1, &(-skew(&a2w)));
    (m_a, c_a)
}

#[cfg(test)]
pub(crate) fn test_params() -> PhysicalParams {
    PhysicalParams::default_vehicle()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_nu(rng: &mut ChaCha8Rng) -> Vec6 {
        Vec6::from_fn(|_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn centered_mass_matrix_is_block_diagonal() {
        let mut p = test_params();
        p.r0 = Vec3::zeros();
        let u = ControlInput::steady(0.0, 0.0, Vec3::zeros());
        let m = mass_matrix(&p, &u);
        assert_abs_diff_eq!(
            m.fixed_view::<3, 3>(0, 0).clone_owned(),
            Mat3::from_diagonal_element(p.total_mass())
        );
        assert_abs_diff_eq!(m.fixed_view::<3, 3>(0, 3).clone_owned(), Mat3::zeros());
        assert_abs_diff_eq!(m.fixed_view::<3, 3>(3, 0).clone_owned(), Mat3::zeros());
        assert_abs_diff_eq!(m.fixed_view::<3, 3>(3, 3).clone_owned(), p.i0);
    }

    #[test]
    fn mass_matrix_symmetric_for_random_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let mut p = test_params();
            p.m0 = rng.random_range(0.05..0.5);
            p.m_bar = rng.random_range(0.01..0.3);
            p.r0 = Vec3::from_fn(|_, _| rng.random_range(-0.1..0.1));
            let u = ControlInput::steady(
                0.0,
                0.0,
                Vec3::from_fn(|_, _| rng.random_range(-0.2..0.2)),
            );
            let m = mass_matrix(&p, &u);
            assert!((m - m.transpose()).norm() < 1e-12);
        }
    }

    #[test]
    fn offset_gondola_produces_expected_coupling_block() {
        let mut p = test_params();
        p.m0 = 1.0;
        p.m_bar = 1.0;
        p.r0 = Vec3::zeros();
        let u = ControlInput::steady(0.0, 0.0, Vec3::new(0.1, 0.0, 0.0));
        let m = mass_matrix(&p, &u);
        let expected = -2.0 * skew(&Vec3::new(0.05, 0.0, 0.0));
        assert_relative_eq!(
            m.fixed_view::<3, 3>(0, 3).clone_owned(),
            expected,
            epsilon = 1e-15
        );
    }

    #[test]
    fn coriolis_vanishes_at_rest() {
        let p = test_params();
        let u = ControlInput::steady(0.0, 0.0, Vec3::new(0.0, 0.0, -0.2));
        assert_abs_diff_eq!(coriolis_matrix(&p, &u, &Vec6::zeros()), Mat6::zeros());
    }

    #[test]
    fn coriolis_power_balance_with_coincident_centers() {
        // r = 0 is the energy-neutral case; r ≠ 0 is knowingly not.
        let mut p = test_params();
        p.r0 = Vec3::zeros();
        let u = ControlInput::steady(0.0, 0.0, Vec3::zeros());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let nu = random_nu(&mut rng);
            let c = coriolis_matrix(&p, &u, &nu);
            let power = (nu.transpose() * c * nu)[0];
            let scale = c.norm() * nu.norm_squared() + 1e-30;
            assert!(power.abs() / scale < 1e-10, "power {power} at scale {scale}");
        }
    }

    #[test]
    fn pure_rotation_coriolis_bottom_block() {
        let p = test_params();
        let r_bar = Vec3::new(0.03, 0.0, -0.2);
        let u = ControlInput::steady(0.0, 0.0, r_bar);
        let omega = Vec3::new(0.3, -0.8, 0.5);
        let nu = Vec6::new(0.0, 0.0, 0.0, omega.x, omega.y, omega.z);
        let c = coriolis_matrix(&p, &u, &nu);
        let i_eff = p.i0 - p.m_bar * skew(&r_bar) * skew(&r_bar);
        assert_relative_eq!(
            c.fixed_view::<3, 3>(3, 3).clone_owned(),
            -skew(&(i_eff * omega)),
            epsilon = 1e-14
        );
    }

    #[test]
    fn neutral_buoyancy_centered_gravity_wrench_is_zero() {
        let mut p = test_params();
        p.r0 = Vec3::zeros();
        p.buoyancy = p.total_mass() * p.gravity;
        let u = ControlInput::steady(0.0, 0.0, Vec3::zeros());
        let w = gravity_buoyancy(&p, &u, &EulerAngles::new(0.4, -0.2, 1.0));
        assert_abs_diff_eq!(w.force, Vec3::zeros(), epsilon = 1e-15);
        assert_abs_diff_eq!(w.moment, Vec3::zeros(), epsilon = 1e-15);
    }

    #[test]
    fn level_attitude_net_weight_force() {
        // m g − B = 0.2·9.80665 − 1.90003 = 0.0613 N, along inertial z.
        let p = test_params();
        let u = ControlInput::steady(0.0, 0.0, Vec3::zeros());
        let w = gravity_buoyancy(&p, &u, &EulerAngles::default());
        assert_relative_eq!(w.force, Vec3::new(0.0, 0.0, 0.0613), epsilon = 1e-9);
    }

    #[test]
    fn rolled_attitude_pendulum_moment() {
        let mut p = test_params();
        p.r0 = Vec3::new(0.0, 0.0, 0.1);
        let u = ControlInput::steady(0.0, 0.0, Vec3::new(0.0, 0.0, 0.1));
        let e = EulerAngles::new(std::f64::consts::FRAC_PI_2, 0.0, 0.0);
        let w = gravity_buoyancy(&p, &u, &e);
        let mg = p.total_mass() * p.gravity;
        assert_relative_eq!(w.moment, Vec3::new(-0.1 * mg, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn control_wrench_matches_hand_evaluation() {
        let p = test_params();
        assert_eq!(
            control_wrench(&p, &ControlInput::steady(0.0, 0.0, Vec3::zeros())),
            Wrench::zero()
        );
        let u = ControlInput::steady(0.045, 0.045, Vec3::new(0.0, 0.0, 0.2));
        let w = control_wrench(&p, &u);
        assert_relative_eq!(w.force, Vec3::new(0.09, 0.0, 0.0), epsilon = 1e-15);
        assert_relative_eq!(w.moment, Vec3::new(0.0, 0.018, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn differential_thrust_yaws_positive_and_scales_linearly() {
        let p = test_params();
        let u = ControlInput::steady(0.06, 0.02, Vec3::zeros());
        let w = control_wrench(&p, &u);
        assert_relative_eq!(w.moment.z, 0.04 * p.thruster_offset, epsilon = 1e-15);
        let doubled = ControlInput::steady(0.12, 0.04, Vec3::zeros());
        let w2 = control_wrench(&p, &doubled);
        assert_relative_eq!(w2.force, 2.0 * w.force, epsilon = 1e-15);
        assert_relative_eq!(w2.moment, 2.0 * w.moment, epsilon = 1e-15);
    }

    #[test]
    fn fixed_gondola_reaction_is_zero() {
        let p = test_params();
        let u = ControlInput::steady(0.1, 0.1, Vec3::new(0.05, 0.0, -0.2));
        let nu = Vec6::new(0.5, 0.1, -0.2, 0.3, -0.4, 0.2);
        assert_eq!(gondola_reaction(&p, &u, &nu), Wrench::zero());
    }

    #[test]
    fn accelerating_gondola_reaction_matches_hand_evaluation() {
        let mut p = test_params();
        p.m_bar = 0.1;
        let u = ControlInput {
            fl: 0.0,
            fr: 0.0,
            r_bar: Vec3::new(0.0, 0.0, 0.2),
            r_bar_dot: Vec3::zeros(),
            r_bar_ddot: Vec3::new(1.0, 0.0, 0.0),
        };
        let w = gondola_reaction(&p, &u, &Vec6::zeros());
        assert_relative_eq!(w.force, Vec3::new(-0.1, 0.0, 0.0), epsilon = 1e-15);
        assert_relative_eq!(w.moment, Vec3::new(0.0, -0.02, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn gondola_reaction_linear_in_gondola_mass() {
        let mut p = test_params();
        let u = ControlInput {
            fl: 0.0,
            fr: 0.0,
            r_bar: Vec3::new(0.02, 0.01, -0.15),
            r_bar_dot: Vec3::new(0.1, 0.0, 0.02),
            r_bar_ddot: Vec3::new(0.3, -0.1, 0.0),
        };
        let nu = Vec6::new(0.4, -0.1, 0.2, 0.5, 0.3, -0.2);
        let w1 = gondola_reaction(&p, &u, &nu);
        p.m_bar *= 2.0;
        let w2 = gondola_reaction(&p, &u, &nu);
        assert_relative_eq!(w2.force, 2.0 * w1.force, epsilon = 1e-14);
        assert_relative_eq!(w2.moment, 2.0 * w1.moment, epsilon = 1e-14);
    }

    #[test]
    fn added_mass_terms_zero_when_unset() {
        let mut p = test_params();
        p.added_mass = [0.0; 6];
        let (m_a, c_a) = added_mass_terms(&p, &Vec6::new(1.0, -0.5, 0.2, 0.3, 0.1, -0.7));
        assert_abs_diff_eq!(m_a, Mat6::zeros());
        assert_abs_diff_eq!(c_a, Mat6::zeros());
    }

    #[test]
    fn added_mass_coriolis_power_balance() {
        let p = test_params();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let nu = random_nu(&mut rng);
            let (m_a, c_a) = added_mass_terms(&p, &nu);
            assert!((m_a - m_a.transpose()).norm() == 0.0);
            let power = (nu.transpose() * c_a * nu)[0];
            let scale = c_a.norm() * nu.norm_squared() + 1e-30;
            assert!(power.abs() / scale < 1e-10);
        }
    }

    #[test]
    fn validate_flags_bad_parameters() {
        let mut p = test_params();
        p.m0 = 0.0;
        assert!(matches!(p.validate(), Err(ParamError::NonPositiveMass { name: "m0", .. })));
        let mut p = test_params();
        p.added_mass[2] = -0.1;
        assert!(matches!(
            p.validate(),
            Err(ParamError::NegativeAddedMass { index: 2, .. })
        ));
        let mut p = test_params();
        p.i0[(0, 1)] = 1.0; // asymmetric
        assert_eq!(p.validate(), Err(ParamError::BadInertia));
        assert!(test_params().validate().is_ok());
        assert!(ControlInput::steady(-0.01, 0.0, Vec3::zeros()).validate().is_err());
    }
}
