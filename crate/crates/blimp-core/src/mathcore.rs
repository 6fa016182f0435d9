//! Frames, rotations, attitude kinematics, flow angles, and the RK4 stepper.
//!
//! Conventions: body frame has x forward, y starboard, z down, origin at the
//! center of buoyancy. Attitude is Z-Y-X yaw-pitch-roll Euler angles, so the
//! body-to-inertial rotation is R = Rz(yaw) Ry(pitch) Rx(roll).

use nalgebra::SVector;
use thiserror::Error;

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;
pub type Vec6 = nalgebra::Vector6<f64>;
pub type Mat6 = nalgebra::Matrix6<f64>;

/// Pitch angles closer than this to ±π/2 are rejected by the Euler-rate map.
pub const GIMBAL_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum MathError {
    #[error("pitch {pitch} rad is within {GIMBAL_MARGIN} of the ±π/2 Euler singularity")]
    GimbalSingularity { pitch: f64 },
    #[error("non-finite value in RK4 stage {stage}")]
    NonFiniteRk4Stage { stage: usize },
}

/// Z-Y-X Euler angles, radians.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EulerAngles {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl EulerAngles {
    pub fn new(roll: f64, pitch: f64, yaw: f64) -> Self {
        Self { roll, pitch, yaw }
    }

    pub fn from_vector(v: &Vec3) -> Self {
        Self { roll: v.x, pitch: v.y, yaw: v.z }
    }

    pub fn vector(&self) -> Vec3 {
        Vec3::new(self.roll, self.pitch, self.yaw)
    }
}

/// Angle of attack α, sideslip β, and airspeed V of a body-frame velocity.
///
/// α = atan2(w, u) so near-vertical descent maps to α near π/2 instead of
/// wrapping; β = asin(v/V). Zero velocity yields all zeros.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FlowState {
    pub alpha: f64,
    pub beta: f64,
    pub speed: f64,
}

/// Skew-symmetric cross-product matrix: skew(a) * b == a × b.
pub fn skew(a: &Vec3) -> Mat3 {
    Mat3::new(
        0.0, -a.z, a.y, //
        a.z, 0.0, -a.x, //
        -a.y, a.x, 0.0,
    )
}

/// Body-to-inertial rotation R = Rz(yaw) Ry(pitch) Rx(roll).
pub fn rotation_body_to_inertial(e: &EulerAngles) -> Mat3 {
    let (sr, cr) = e.roll.sin_cos();
    let (sp, cp) = e.pitch.sin_cos();
    let (sy, cy) = e.yaw.sin_cos();
    Mat3::new(
        cy * cp,
        cy * sp * sr - sy * cr,
        cy * sp * cr + sy * sr,
        sy * cp,
        sy * sp * sr + cy * cr,
        sy * sp * cr - cy * sr,
        -sp,
        cp * sr,
        cp * cr,
    )
}

/// Maps body angular velocity to Euler angle rates.
///
/// Fails within [`GIMBAL_MARGIN`] of pitch ±π/2 where the map blows up.
pub fn euler_rate_map(e: &EulerAngles) -> Result<Mat3, MathError> {
    if e.pitch.abs() >= std::f64::consts::FRAC_PI_2 - GIMBAL_MARGIN {
        return Err(MathError::GimbalSingularity { pitch: e.pitch });
    }
    let (sr, cr) = e.roll.sin_cos();
    let cp = e.pitch.cos();
    let tp = e.pitch.tan();
    Ok(Mat3::new(
        1.0,
        sr * tp,
        cr * tp,
        0.0,
        cr,
        -sr,
        0.0,
        sr / cp,
        cr / cp,
    ))
}

/// Full kinematic Jacobian: eta_dot = J(eta) * nu, block-diagonal in the
/// rotation and the Euler-rate map.
pub fn jacobian(e: &EulerAngles) -> Result<Mat6, MathError> {
    let r = rotation_body_to_inertial(e);
    let w = euler_rate_map(e)?;
    let mut j = Mat6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    j.fixed_view_mut::<3, 3>(3, 3).copy_from(&w);
    Ok(j)
}

/// Flow angles and airspeed of a body-frame linear velocity.
pub fn flow_state(v: &Vec3) -> FlowState {
    let speed = v.norm();
    if speed == 0.0 {
        return FlowState::default();
    }
    FlowState {
        alpha: v.z.atan2(v.x),
        beta: (v.y / speed).clamp(-1.0, 1.0).asin(),
        speed,
    }
}

/// Wind-to-body rotation: maps (−drag, side, −lift) wind-frame forces into
/// the body frame. Columns are the wind axes expressed in body coordinates,
/// so R * (V, 0, 0) recovers the body velocity.
pub fn rotation_velocity_to_body(f: &FlowState) -> Mat3 {
    let (sa, ca) = f.alpha.sin_cos();
    let (sb, cb) = f.beta.sin_cos();
    Mat3::new(
        ca * cb,
        -ca * sb,
        -sa,
        sb,
        cb,
        0.0,
        sa * cb,
        -sa * sb,
        ca,
    )
}

/// One classical RK4 step of x' = f(x) over dt.
///
/// Every stage derivative and the combined update are checked for finiteness;
/// a NaN or infinity aborts with the stage index (1-4 for the stage
/// derivatives, 5 for the combined update). Field errors pass through.
pub fn rk4_step<const N: usize, E, F>(
    mut f: F,
    x: &SVector<f64, N>,
    dt: f64,
) -> Result<SVector<f64, N>, E>
where
    E: From<MathError>,
    F: FnMut(&SVector<f64, N>) -> Result<SVector<f64, N>, E>,
{
    fn check<const N: usize>(k: &SVector<f64, N>, stage: usize) -> Result<(), MathError> {
        if k.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(MathError::NonFiniteRk4Stage { stage })
        }
    }
    let k1 = f(x)?;
    check(&k1, 1)?;
    let k2 = f(&(x + k1 * (dt / 2.0)))?;
    check(&k2, 2)?;
    let k3 = f(&(x + k2 * (dt / 2.0)))?;
    check(&k3, 3)?;
    let k4 = f(&(x + k3 * dt))?;
    check(&k4, 4)?;
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    check(&next, 5)?;
    Ok(next)
}

/// Iterates [`rk4_step`] and returns the state after every step (length
/// `steps`, initial state not included).
pub fn rk4_rollout<const N: usize, E, F>(
    mut f: F,
    x0: &SVector<f64, N>,
    dt: f64,
    steps: usize,
) -> Result<Vec<SVector<f64, N>>, E>
where
    E: From<MathError>,
    F: FnMut(&SVector<f64, N>) -> Result<SVector<f64, N>, E>,
{
    let mut out = Vec::with_capacity(steps);
    let mut x = *x0;
    for _ in 0..steps {
        x = rk4_step(&mut f, &x, dt)?;
        out.push(x);
    }
    Ok(out)
}
