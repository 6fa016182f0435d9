//! The two aerodynamic submodels.
//!
//! ACM: lift/drag/side force and moments from low-order polynomial surfaces
//! in (α, β), scaled by dynamic pressure and rotated from the velocity frame
//! into the body frame; valid for fast, low-incidence flight. GDM: diagonal
//! linear+quadratic velocity damping; valid for slow or high-incidence
//! flight. Both produce a body-frame wrench about the CoB.

use crate::mathcore::{flow_state, rotation_velocity_to_body, Vec3, Vec6};
use crate::rigidbody::{ParamError, Wrench};

/// One monomial c·α^i·β^j of a coefficient surface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolyTerm {
    pub coeff: f64,
    pub alpha_pow: u8,
    pub beta_pow: u8,
}

/// Polynomial coefficient surface C(α, β) = Σ c·α^i·β^j.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PolySurface {
    pub terms: Vec<PolyTerm>,
}

impl PolySurface {
    pub fn new(terms: &[(f64, u8, u8)]) -> Self {
        Self {
            terms: terms
                .iter()
                .map(|&(coeff, alpha_pow, beta_pow)| PolyTerm { coeff, alpha_pow, beta_pow })
                .collect(),
        }
    }

    pub fn eval(&self, alpha: f64, beta: f64) -> f64 {
        self.terms
            .iter()
            .map(|t| t.coeff * alpha.powi(t.alpha_pow as i32) * beta.powi(t.beta_pow as i32))
            .sum()
    }

    /// Monomial value α^i·β^j of each term, the OLS regressor row.
    pub fn basis_values(&self, alpha: f64, beta: f64) -> Vec<f64> {
        self.terms
            .iter()
            .map(|t| alpha.powi(t.alpha_pow as i32) * beta.powi(t.beta_pow as i32))
            .collect()
    }

    fn term_name(prefix: &str, t: &PolyTerm) -> String {
        if t.alpha_pow == 0 && t.beta_pow == 0 {
            return format!("{prefix}0");
        }
        let mut name = prefix.to_string();
        if t.alpha_pow > 0 {
            name.push_str(&format!("_a{}", t.alpha_pow));
        }
        if t.beta_pow > 0 {
            name.push_str(&format!("_b{}", t.beta_pow));
        }
        name
    }
}

/// ACM coefficient set: six polynomial surfaces plus rotational damping.
#[derive(Debug, Clone, PartialEq)]
pub struct AcmCoeffs {
    /// Air density [kg/m³].
    pub rho: f64,
    /// Reference area [m²].
    pub area: f64,
    pub cd: PolySurface,
    pub cs: PolySurface,
    pub cl: PolySurface,
    pub cm1: PolySurface,
    pub cm2: PolySurface,
    pub cm3: PolySurface,
    /// Rotational damping K1, K2, K3 [N·m·s].
    pub k: [f64; 3],
}

impl AcmCoeffs {
    /// Zeroed coefficients on the default basis:
    /// C_D = C_D0 + C_Dα α² + C_Dβ β²; C_S = C_Sβ β; C_L = C_L0 + C_Lα α;
    /// C_M1 = C_M1β β; C_M2 = C_M20 + C_M2α α; C_M3 = C_M3β β.
    pub fn default_basis(rho: f64, area: f64) -> Self {
        Self {
            rho,
            area,
            cd: PolySurface::new(&[(0.0, 0, 0), (0.0, 2, 0), (0.0, 0, 2)]),
            cs: PolySurface::new(&[(0.0, 0, 1)]),
            cl: PolySurface::new(&[(0.0, 0, 0), (0.0, 1, 0)]),
            cm1: PolySurface::new(&[(0.0, 0, 1)]),
            cm2: PolySurface::new(&[(0.0, 0, 0), (0.0, 1, 0)]),
            cm3: PolySurface::new(&[(0.0, 0, 1)]),
            k: [0.0; 3],
        }
    }

    fn surfaces(&self) -> [(&'static str, &PolySurface); 6] {
        [
            ("cd", &self.cd),
            ("cs", &self.cs),
            ("cl", &self.cl),
            ("cm1", &self.cm1),
            ("cm2", &self.cm2),
            ("cm3", &self.cm3),
        ]
    }

    fn surfaces_mut(&mut self) -> [&mut PolySurface; 6] {
        [
            &mut self.cd,
            &mut self.cs,
            &mut self.cl,
            &mut self.cm1,
            &mut self.cm2,
            &mut self.cm3,
        ]
    }

    /// Number of trainable entries (all surface terms plus K1–K3).
    pub fn param_count(&self) -> usize {
        self.surfaces().iter().map(|(_, s)| s.terms.len()).sum::<usize>() + 3
    }

    /// Trainable entries in a fixed order: surface terms (cd, cs, cl, cm1,
    /// cm2, cm3), then K1–K3. ρ and A are not trainable: they only appear in
    /// products with the coefficients.
    pub fn params(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::with_capacity(self.param_count());
        for (_, s) in self.surfaces() {
            out.extend(s.terms.iter().map(|t| t.coeff));
        }
        out.extend_from_slice(&self.k);
        out
    }

    pub fn set_params(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.param_count(), "ACM parameter length");
        let mut it = values.iter();
        for s in self.surfaces_mut() {
            for t in &mut s.terms {
                t.coeff = *it.next().unwrap();
            }
        }
        for k in &mut self.k {
            *k = *it.next().unwrap();
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.param_count());
        for (prefix, s) in self.surfaces() {
            out.extend(s.terms.iter().map(|t| PolySurface::term_name(prefix, t)));
        }
        out.extend(["k1", "k2", "k3"].map(String::from));
        out
    }

    pub fn validate(&self) -> Result<(), ParamError> {
        if !(self.rho > 0.0) {
            return Err(ParamError::BadDensity(self.rho));
        }
        if !(self.area > 0.0) {
            return Err(ParamError::BadArea(self.area));
        }
        for (name, value) in self.param_names().into_iter().zip(self.params()) {
            if !value.is_finite() {
                return Err(ParamError::NonFiniteCoeff { name });
            }
        }
        Ok(())
    }

    /// Plausible sub-scale winged-airship values; the config-file defaults.
    pub fn plausible() -> Self {
        let mut c = Self::default_basis(1.225, 0.15);
        c.set_params(&[
            0.9, 2.0, 1.0, // cd
            -0.8, // cs
            0.4, 4.0, // cl
            -0.05, // cm1
            0.06, -0.25, // cm2
            -0.08, // cm3
            -0.004, -0.01, -0.01, // k
        ]);
        c
    }

    #[cfg(test)]
    pub fn test_values() -> Self {
        Self::plausible()
    }
}

/// GDM coefficient set: diagonal linear and quadratic drag.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GdmCoeffs {
    /// Linear drag (X_u, Y_v, Z_w, K_p, M_q, N_r).
    pub dl: [f64; 6],
    /// Quadratic drag (X_u|u|, ..., N_r|r|).
    pub dq: [f64; 6],
}

pub const GDM_PARAM_COUNT: usize = 12;

const GDM_LINEAR_NAMES: [&str; 6] = ["x_u", "y_v", "z_w", "k_p", "m_q", "n_r"];
const GDM_QUAD_NAMES: [&str; 6] = ["x_uu", "y_vv", "z_ww", "k_pp", "m_qq", "n_rr"];

impl GdmCoeffs {
    pub fn param_count(&self) -> usize {
        GDM_PARAM_COUNT
    }

    pub fn params(&self) -> Vec<f64> {
        self.dl.iter().chain(self.dq.iter()).copied().collect()
    }

    pub fn set_params(&mut self, values: &[f64]) {
        assert_eq!(values.len(), GDM_PARAM_COUNT, "GDM parameter length");
        self.dl.copy_from_slice(&values[..6]);
        self.dq.copy_from_slice(&values[6..]);
    }

    pub fn param_names(&self) -> Vec<String> {
        GDM_LINEAR_NAMES
            .iter()
            .chain(GDM_QUAD_NAMES.iter())
            .map(|s| s.to_string())
            .collect()
    }

    pub fn validate(&self) -> Result<(), ParamError> {
        for (name, value) in self.param_names().into_iter().zip(self.params()) {
            if !value.is_finite() {
                return Err(ParamError::NonFiniteCoeff { name });
            }
            if value < 0.0 {
                return Err(ParamError::NegativeDrag { name, value });
            }
        }
        Ok(())
    }

    /// Plausible low-speed damping values; the config-file defaults.
    pub fn plausible() -> Self {
        Self {
            dl: [0.05, 0.08, 0.10, 0.004, 0.004, 0.006],
            dq: [0.20, 0.30, 0.40, 0.010, 0.010, 0.020],
        }
    }

    #[cfg(test)]
    pub fn test_values() -> Self {
        Self::plausible()
    }
}

/// ACM wrench: loads (D, S, L, M1, M2, M3) built from the coefficient
/// surfaces at the current flow angles, scaled by dynamic pressure, with
/// rotational damping added to the moments; force triple (−D, S, −L) and
/// moment triple each rotated from the velocity frame into the body frame.
/// At V = 0 only the damping moments survive.
pub fn acm_wrench(c: &AcmCoeffs, nu: &Vec6) -> Wrench {
    let fs = flow_state(&Vec3::new(nu[0], nu[1], nu[2]));
    let q = 0.5 * c.rho * fs.speed * fs.speed * c.area;
    let drag = q * c.cd.eval(fs.alpha, fs.beta);
    let side = q * c.cs.eval(fs.alpha, fs.beta);
    let lift = q * c.cl.eval(fs.alpha, fs.beta);
    let m1 = q * c.cm1.eval(fs.alpha, fs.beta) + c.k[0] * nu[3];
    let m2 = q * c.cm2.eval(fs.alpha, fs.beta) + c.k[1] * nu[4];
    let m3 = q * c.cm3.eval(fs.alpha, fs.beta) + c.k[2] * nu[5];
    let r = rotation_velocity_to_body(&fs);
    Wrench {
        force: r * Vec3::new(-drag, side, -lift),
        moment: r * Vec3::new(m1, m2, m3),
    }
}

/// GDM wrench: componentwise −(DL_i + DQ_i·|ν_i|)·ν_i.
pub fn gdm_wrench(c: &GdmCoeffs, nu: &Vec6) -> Wrench {
    let v = Vec6::from_fn(|i, _| -(c.dl[i] + c.dq[i] * nu[i].abs()) * nu[i]);
    Wrench::from_vector(&v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn poly_surface_evaluates_monomials() {
        let s = PolySurface::new(&[(1.5, 0, 0), (2.0, 2, 0), (-0.5, 1, 1)]);
        let (a, b) = (0.3, -0.2);
        assert_relative_eq!(
            s.eval(a, b),
            1.5 + 2.0 * a * a - 0.5 * a * b,
            epsilon = 1e-15
        );
        assert_eq!(s.basis_values(a, b), vec![1.0, a * a, a * b]);
    }

    #[test]
    fn acm_param_round_trip_preserves_names_and_values() {
        let c = AcmCoeffs::test_values();
        assert_eq!(c.param_count(), 13);
        let names = c.param_names();
        assert_eq!(names.len(), 13);
        assert_eq!(names[0], "cd0");
        assert_eq!(names[1], "cd_a2");
        assert_eq!(names[12], "k3");
        let mut c2 = AcmCoeffs::default_basis(c.rho, c.area);
        c2.set_params(&c.params());
        assert_eq!(c, c2);
    }

    #[test]
    fn acm_wrench_at_rest_is_zero() {
        let c = AcmCoeffs::test_values();
        let w = acm_wrench(&c, &Vec6::zeros());
        assert_abs_diff_eq!(w.force, Vec3::zeros());
        assert_abs_diff_eq!(w.moment, Vec3::zeros());
    }

    #[test]
    fn pure_pitch_rate_isolates_rotational_damping() {
        let mut c = AcmCoeffs::default_basis(1.225, 0.15);
        c.k = [0.0, 0.7, 0.0];
        let w = acm_wrench(&c, &Vec6::new(0.0, 0.0, 0.0, 0.0, 1.0, 0.0));
        assert_abs_diff_eq!(w.force, Vec3::zeros());
        assert_relative_eq!(w.moment, Vec3::new(0.0, 0.7, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn lift_fixture_reproduces_rotated_force() {
        // Flight point V = 0.68 m/s, α = 0.19 rad; C_L back-solved so the
        // lift magnitude is 0.0803 N (≈ 8.19 gf).
        let (v, alpha, lift) = (0.68f64, 0.19f64, 0.0803f64);
        let q = 0.5 * 1.225 * v * v * 0.15;
        let mut c = AcmCoeffs::default_basis(1.225, 0.15);
        c.cl = PolySurface::new(&[(lift / q, 0, 0)]);
        let nu = Vec6::new(v * alpha.cos(), 0.0, v * alpha.sin(), 0.0, 0.0, 0.0);
        let w = acm_wrench(&c, &nu);
        assert_relative_eq!(w.force.norm(), lift, epsilon = 1e-10);
        // (−D, S, −L) with only L nonzero, rotated by the wind rotation.
        let expected =
            crate::mathcore::rotation_velocity_to_body(&crate::mathcore::flow_state(
                &Vec3::new(nu[0], nu[1], nu[2]),
            )) * Vec3::new(0.0, 0.0, -lift);
        assert_relative_eq!(w.force, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(w.moment, Vec3::zeros());
    }

    #[test]
    fn acm_force_scales_with_speed_squared() {
        let mut c = AcmCoeffs::test_values();
        c.k = [0.0; 3];
        let v = Vec3::new(0.3, 0.05, 0.12);
        let base = acm_wrench(&c, &Vec6::new(v.x, v.y, v.z, 0.0, 0.0, 0.0));
        for s in [0.5, 2.0, 3.7] {
            let scaled = acm_wrench(&c, &Vec6::new(s * v.x, s * v.y, s * v.z, 0.0, 0.0, 0.0));
            assert_relative_eq!(scaled.force, s * s * base.force, epsilon = 1e-12);
            assert_relative_eq!(scaled.moment, s * s * base.moment, epsilon = 1e-12);
        }
    }

    #[test]
    fn acm_wrench_vanishes_continuously_at_zero_speed() {
        let c = AcmCoeffs::test_values();
        let mut prev = f64::INFINITY;
        for exp in 1..8 {
            let v = 10f64.powi(-exp);
            let w = acm_wrench(&c, &Vec6::new(v, 0.0, v * 0.5, 0.0, 0.0, 0.0));
            let norm = w.force.norm() + w.moment.norm();
            assert!(norm < prev);
            assert!(norm < 10.0 * v * v, "wrench {norm} not O(V²) at V={v}");
            prev = norm;
        }
    }

    #[test]
    fn gdm_wrench_matches_hand_evaluation() {
        let mut c = GdmCoeffs::default();
        c.dl[0] = 0.1;
        c.dq[0] = 0.2;
        let w = gdm_wrench(&c, &Vec6::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0));
        assert_relative_eq!(w.force.x, -0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(w.force.y, 0.0);
        assert_abs_diff_eq!(w.moment, Vec3::zeros());
    }

    #[test]
    fn gdm_wrench_is_odd_and_dissipative() {
        let c = GdmCoeffs::test_values();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let nu = Vec6::from_fn(|_, _| rng.random_range(-2.0..2.0));
            let w = gdm_wrench(&c, &nu);
            let w_neg = gdm_wrench(&c, &(-nu));
            assert_relative_eq!(w_neg.vector(), -w.vector(), epsilon = 1e-14);
            let power = nu.dot(&w.vector());
            assert!(power <= 0.0, "GDM added energy: {power}");
        }
    }

    #[test]
    fn gdm_validate_rejects_negative_entries() {
        let mut c = GdmCoeffs::test_values();
        assert!(c.validate().is_ok());
        c.dq[3] = -1e-9;
        assert!(matches!(c.validate(), Err(ParamError::NegativeDrag { .. })));
    }
}
