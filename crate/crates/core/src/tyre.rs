//! Tyre force maps: a simplified Magic Formula for the front axle and a
//! combined-slip Magic Formula for the rear axle.
//!
//! Sign conventions follow [`crate::dynamics`]: a positive slip angle means
//! the wheel heading points left of the wheel-centre velocity and produces a
//! positive (leftward) lateral force; a positive slip ratio produces a
//! positive (forward) longitudinal force.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Low-speed regularisation floor for slip-ratio denominators, m/s.
///
/// Below this speed the closed loop never operates; the floor only keeps the
/// slip ratio finite through start-up transients.
pub const V_FLOOR: f64 = 0.5;

#[derive(Debug, Error)]
pub enum TyreError {
    #[error("non-finite tyre input: {0}")]
    InvalidInput(&'static str),
    #[error("vertical load must be positive, got {0} N")]
    NonPositiveLoad(f64),
}

/// Front-axle tyre: `Fy = D(Fz) * sin(C * atan(B * alpha))`.
///
/// `D` scales affinely in the vertical load: `D(Fz) = d * (load_sens +
/// (1 - load_sens) * Fz / fz_nom)`, so `D(fz_nom) = d` and the slope
/// `dD/dFz = d * (1 - load_sens) / fz_nom` models load sensitivity of peak
/// grip. The cornering stiffness `B*C*D` follows the same load scaling.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SimplifiedTyreParams {
    /// Stiffness factor B, 1/rad.
    pub b: f64,
    /// Shape factor C, dimensionless, in (1, 2].
    pub c: f64,
    /// Peak lateral force at the nominal load, N.
    pub d: f64,
    /// Nominal vertical load at which `d` applies, N.
    pub fz_nom: f64,
    /// Load sensitivity of the peak, dimensionless, in [0, 1).
    pub load_sens: f64,
}

impl SimplifiedTyreParams {
    /// Peak force at the given vertical load.
    pub fn peak(&self, fz: f64) -> f64 {
        self.d * (self.load_sens + (1.0 - self.load_sens) * fz / self.fz_nom)
    }

    /// Scale peak grip by a surface friction factor.
    pub fn scaled_mu(&self, scale: f64) -> Self {
        Self { d: self.d * scale, ..*self }
    }
}

impl Default for SimplifiedTyreParams {
    fn default() -> Self {
        // Sports-sedan front tyre, peak lateral acceleration around 1 g.
        Self { b: 11.0, c: 1.45, d: 10_400.0, fz_nom: 9000.0, load_sens: 0.06 }
    }
}

/// Rear-axle combined-slip Magic Formula parameters.
///
/// Pure-slip curves use the sine-of-arctangent family with curvature factor
/// `E`; combined slip multiplies each pure curve by a cosine-of-arctangent
/// weighting whose stiffness shrinks with the other slip component, so the
/// resultant stays inside the friction circle while deep combined slip keeps
/// a realistic share of lateral force.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Mf52TyreParams {
    /// Lateral stiffness factor, 1/rad.
    pub by: f64,
    /// Lateral shape factor.
    pub cy: f64,
    /// Lateral curvature factor, <= 1.
    pub ey: f64,
    /// Lateral friction scale (peak Fy = mu_y * Fz at nominal load).
    pub mu_y: f64,
    /// Longitudinal stiffness factor, per unit slip ratio.
    pub bx: f64,
    /// Longitudinal shape factor.
    pub cx: f64,
    /// Longitudinal curvature factor, <= 1.
    pub ex: f64,
    /// Longitudinal friction scale.
    pub mu_x: f64,
    /// Combined weighting: lateral loss vs slip ratio, base stiffness.
    pub r_by1: f64,
    /// Combined weighting: decay of `r_by1` with slip angle.
    pub r_by2: f64,
    /// Combined weighting: longitudinal loss vs slip angle, base stiffness.
    pub r_bx1: f64,
    /// Combined weighting: decay of `r_bx1` with slip ratio.
    pub r_bx2: f64,
    /// Nominal vertical load, N.
    pub fz_nom: f64,
    /// Load sensitivity of both friction scales.
    pub load_sens: f64,
}

impl Mf52TyreParams {
    /// Effective lateral friction coefficient at the given load.
    pub fn mu_y_eff(&self, fz: f64) -> f64 {
        (self.mu_y * (1.0 - self.load_sens * (fz - self.fz_nom) / self.fz_nom)).max(0.2 * self.mu_y)
    }

    /// Effective longitudinal friction coefficient at the given load.
    pub fn mu_x_eff(&self, fz: f64) -> f64 {
        (self.mu_x * (1.0 - self.load_sens * (fz - self.fz_nom) / self.fz_nom)).max(0.2 * self.mu_x)
    }

    /// Scale both friction coefficients by a surface friction factor.
    pub fn scaled_mu(&self, scale: f64) -> Self {
        Self { mu_y: self.mu_y * scale, mu_x: self.mu_x * scale, ..*self }
    }
}

impl Default for Mf52TyreParams {
    fn default() -> Self {
        // Sports-sedan rear tyre; lateral peak near 9 deg slip, longitudinal
        // peak near 0.14 slip ratio.
        Self {
            by: 12.0,
            cy: 1.50,
            ey: 0.20,
            mu_y: 0.92,
            bx: 16.0,
            cx: 1.45,
            ex: 0.30,
            mu_x: 1.05,
            r_by1: 12.0,
            r_by2: 6.0,
            r_bx1: 14.0,
            r_bx2: 10.0,
            fz_nom: 8800.0,
            load_sens: 0.12,
        }
    }
}

/// Tyre-frame force pair.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TyreForce {
    /// Longitudinal force, N, positive forward.
    pub fx: f64,
    /// Lateral force, N, positive left.
    pub fy: f64,
}

fn check_finite(value: f64, what: &'static str) -> Result<(), TyreError> {
    if value.is_finite() { Ok(()) } else { Err(TyreError::InvalidInput(what)) }
}

/// Pure-slip Magic Formula shape `sin(C * atan(phi))` with curvature factor,
/// `phi = B s - E (B s - atan(B s))`. Odd in `s`, unit peak.
fn mf_shape(s: f64, b: f64, c: f64, e: f64) -> f64 {
    let bs = b * s;
    let phi = bs - e * (bs - bs.atan());
    (c * phi.atan()).sin()
}

/// Derivative of [`mf_shape`] with respect to `s`.
fn mf_shape_d(s: f64, b: f64, c: f64, e: f64) -> f64 {
    let bs = b * s;
    let phi = bs - e * (bs - bs.atan());
    let dphi = b * (1.0 - e * (bs * bs) / (1.0 + bs * bs));
    c * (c * phi.atan()).cos() * dphi / (1.0 + phi * phi)
}

/// Front lateral force from the simplified Magic Formula.
///
/// Odd in `alpha`; valid for |alpha| <= pi/2 and `fz > 0`.
pub fn front_lateral(alpha: f64, fz: f64, p: &SimplifiedTyreParams) -> Result<f64, TyreError> {
    check_finite(alpha, "alpha")?;
    check_finite(fz, "fz")?;
    if fz <= 0.0 {
        return Err(TyreError::NonPositiveLoad(fz));
    }
    Ok(p.peak(fz) * (p.c * (p.b * alpha).atan()).sin())
}

/// Slope of the front lateral force in `alpha`.
pub fn front_lateral_d_alpha(alpha: f64, fz: f64, p: &SimplifiedTyreParams) -> f64 {
    p.peak(fz) * p.c * (p.c * (p.b * alpha).atan()).cos() * p.b / (1.0 + (p.b * alpha).powi(2))
}

/// Rear combined-slip forces.
///
/// Pure curves are weighted by `cos(atan(.))` factors whose stiffness decays
/// with the companion slip, so |Fy| degrades monotonically as |kappa| grows at
/// fixed `alpha` and the resultant respects the friction circle.
pub fn rear_combined(
    alpha: f64,
    kappa: f64,
    fz: f64,
    p: &Mf52TyreParams,
) -> Result<TyreForce, TyreError> {
    check_finite(alpha, "alpha")?;
    check_finite(kappa, "kappa")?;
    check_finite(fz, "fz")?;
    if fz <= 0.0 {
        return Err(TyreError::NonPositiveLoad(fz));
    }
    let dx = p.mu_x_eff(fz) * fz;
    let dy = p.mu_y_eff(fz) * fz;
    let fx0 = dx * mf_shape(kappa, p.bx, p.cx, p.ex);
    let fy0 = dy * mf_shape(alpha, p.by, p.cy, p.ey);
    let g_xa = combined_weight(alpha, p.r_bx1, p.r_bx2, kappa);
    let g_yk = combined_weight(kappa, p.r_by1, p.r_by2, alpha);
    Ok(TyreForce { fx: fx0 * g_xa, fy: fy0 * g_yk })
}

/// `cos(atan(B(other) * s))` with `B(other) = b1 * cos(atan(b2 * other))`.
fn combined_weight(s: f64, b1: f64, b2: f64, other: f64) -> f64 {
    let b = b1 * (b2 * other).atan().cos();
    (b * s).atan().cos()
}

/// Longitudinal slip ratio with a low-speed regularisation floor.
///
/// `kappa = (omega * r_e - v_wheel) / max(|v_wheel|, V_FLOOR)`.
pub fn slip_ratio(omega: f64, v_wheel: f64, r_e: f64) -> f64 {
    (omega * r_e - v_wheel) / v_wheel.abs().max(V_FLOOR)
}

/// Smoothly capped squared longitudinal utilisation for the friction-ellipse
/// derate: behaves as `u^2` for small `u` and saturates below `cap^2`.
fn capped_utilisation_sq(u: f64, cap: f64) -> f64 {
    let q = (u / cap).powi(2).powi(4);
    u * u / (1.0 + q).powf(0.25)
}

fn capped_utilisation_sq_d(u: f64, cap: f64) -> f64 {
    let c2 = cap * cap;
    let q = (u * u / c2).powi(4);
    let common = (1.0 + q).powf(0.25);
    2.0 * u / common - u * u * (8.0 * u.powi(7) / c2.powi(4)) / (4.0 * common.powi(5))
}

/// Rear lateral force when the longitudinal force is prescribed by the drive
/// torque rather than by a wheel-speed slip ratio.
///
/// The pure lateral curve is derated by the friction-ellipse factor
/// `sqrt(1 - (fx / (mu_x * Fz))^2)`, with the utilisation smoothly capped at
/// 0.98 so the derate and its derivative stay finite under torque demands the
/// tyre cannot transmit. This is the rear model used by the prediction
/// dynamics, where no wheel-speed state exists.
pub fn rear_lateral_under_fx(
    alpha: f64,
    fx: f64,
    fz: f64,
    p: &Mf52TyreParams,
) -> Result<f64, TyreError> {
    check_finite(alpha, "alpha")?;
    check_finite(fx, "fx")?;
    check_finite(fz, "fz")?;
    if fz <= 0.0 {
        return Err(TyreError::NonPositiveLoad(fz));
    }
    let denom = p.mu_x_eff(fz) * fz;
    let u = if denom > 0.0 { fx / denom } else { 0.0 };
    let derate = (1.0 - capped_utilisation_sq(u, 0.98)).sqrt();
    Ok(p.mu_y_eff(fz) * fz * mf_shape(alpha, p.by, p.cy, p.ey) * derate)
}

/// Partial derivatives of [`rear_lateral_under_fx`], `(d/d_alpha, d/d_fx, d/d_fz)`.
pub fn rear_lateral_under_fx_partials(
    alpha: f64,
    fx: f64,
    fz: f64,
    p: &Mf52TyreParams,
) -> (f64, f64, f64) {
    let mu_x = p.mu_x_eff(fz);
    let mu_y = p.mu_y_eff(fz);
    let denom = mu_x * fz;
    let cap = if denom > 0.0 { fx / denom } else { 0.0 };
    let s2 = capped_utilisation_sq(cap, 0.98);
    let derate = (1.0 - s2).sqrt();
    let shape = mf_shape(alpha, p.by, p.cy, p.ey);
    let dshape = mf_shape_d(alpha, p.by, p.cy, p.ey);

    let d_alpha = mu_y * fz * dshape * derate;

    let ds2_du = capped_utilisation_sq_d(cap, 0.98);
    let dderate_du = -ds2_du / (2.0 * derate);
    let du_dfx = 1.0 / (mu_x * fz);
    let d_fx = mu_y * fz * shape * dderate_du * du_dfx;

    // fz enters through dy = mu_y(fz) * fz, and through u = fx / (mu_x(fz) * fz).
    let clamp_active_y = mu_y <= 0.2 * p.mu_y + f64::EPSILON;
    let dmu_y = if clamp_active_y { 0.0 } else { -p.mu_y * p.load_sens / p.fz_nom };
    let clamp_active_x = mu_x <= 0.2 * p.mu_x + f64::EPSILON;
    let dmu_x = if clamp_active_x { 0.0 } else { -p.mu_x * p.load_sens / p.fz_nom };
    let ddy_dfz = mu_y + fz * dmu_y;
    let dm_dfz = mu_x + fz * dmu_x; // d(mu_x * fz)/dfz
    let du_dfz = -fx * dm_dfz / (mu_x * fz).powi(2);
    let d_fz = ddy_dfz * shape * derate + mu_y * fz * shape * dderate_du * du_dfz;

    (d_alpha, d_fx, d_fz)
}

/// Pure rear longitudinal force at zero slip angle, used for torque-balance
/// inversion and peak location.
pub fn rear_longitudinal_pure(kappa: f64, fz: f64, p: &Mf52TyreParams) -> f64 {
    p.mu_x_eff(fz) * fz * mf_shape(kappa, p.bx, p.cx, p.ex)
}

/// Locate the peak of an odd force curve by dense scan, returning
/// `(s_peak, f_peak)` over `s` in `(0, s_max]` at the given resolution.
pub fn scan_peak(mut f: impl FnMut(f64) -> f64, s_max: f64, ds: f64) -> (f64, f64) {
    let mut best_s = ds;
    let mut best_f = f(ds).abs();
    let n = (s_max / ds) as usize;
    for i in 2..=n {
        let s = ds * i as f64;
        let v = f(s).abs();
        if v > best_f {
            best_f = v;
            best_s = s;
        }
    }
    (best_s, best_f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn front() -> SimplifiedTyreParams {
        SimplifiedTyreParams::default()
    }

    fn rear() -> Mf52TyreParams {
        Mf52TyreParams::default()
    }

    #[test]
    fn front_lateral_zero_at_origin() {
        assert_eq!(front_lateral(0.0, 8000.0, &front()).unwrap(), 0.0);
    }

    #[test]
    fn front_lateral_rejects_non_finite() {
        assert!(front_lateral(f64::NAN, 8000.0, &front()).is_err());
        assert!(front_lateral(0.1, f64::INFINITY, &front()).is_err());
        assert!(front_lateral(0.1, -10.0, &front()).is_err());
    }

    #[test]
    fn front_peak_location_matches_dense_scan() {
        // Oracle: brute-force scan at 1e-4 rad resolution. The arctan peak of
        // sin(C atan(B a)) sits where C atan(B a) = pi/2.
        let p = front();
        let fz = 8500.0;
        let (alpha_scan, _) =
            scan_peak(|a| front_lateral(a, fz, &p).unwrap(), 0.8, 1e-4);
        let alpha_analytic = ((std::f64::consts::FRAC_PI_2 / p.c).tan()) / p.b;
        assert!((alpha_scan - alpha_analytic).abs() <= 2e-4,
            "scan {alpha_scan} vs analytic {alpha_analytic}");
    }

    #[test]
    fn rear_no_slip_no_force() {
        let f = rear_combined(0.0, 0.0, 8800.0, &rear()).unwrap();
        assert_eq!(f.fx, 0.0);
        assert_eq!(f.fy, 0.0);
    }

    #[test]
    fn rear_lateral_degrades_monotonically_with_kappa() {
        // Direct evaluation over a kappa sweep at fixed alpha = 0.1 rad.
        let p = rear();
        let mut last = f64::INFINITY;
        for i in 0..=100 {
            let kappa = i as f64 * 0.01;
            let fy = rear_combined(0.1, kappa, 8800.0, &p).unwrap().fy.abs();
            assert!(fy <= last + 1e-12, "fy not non-increasing at kappa={kappa}");
            last = fy;
        }
    }

    #[test]
    fn rear_longitudinal_peak_matches_dense_scan() {
        let p = rear();
        let fz = 8800.0;
        let (kappa_scan, f_scan) =
            scan_peak(|k| rear_combined(0.0, k, fz, &p).unwrap().fx, 1.0, 1e-4);
        // The scan result must dominate a coarse sweep of the same curve.
        for i in 0..200 {
            let k = 0.005 * i as f64;
            assert!(rear_combined(0.0, k, fz, &p).unwrap().fx.abs() <= f_scan + 1e-9);
        }
        assert!(kappa_scan > 0.05 && kappa_scan < 0.3, "kappa peak {kappa_scan}");
    }

    #[test]
    fn friction_circle_bound_on_grid() {
        let p = rear();
        for &fz in &[4000.0, 8800.0, 12_000.0] {
            let bound = 1.01 * p.mu_x_eff(fz).max(p.mu_y_eff(fz)) * fz;
            for i in -60..=60 {
                for j in -40..=160 {
                    let alpha = i as f64 * 0.02;
                    let kappa = j as f64 * 0.025;
                    let f = rear_combined(alpha, kappa, fz, &p).unwrap();
                    let res = f.fx.hypot(f.fy);
                    assert!(
                        res <= bound,
                        "friction circle violated: alpha={alpha} kappa={kappa} fz={fz} res={res} bound={bound}"
                    );
                }
            }
        }
    }

    #[test]
    fn c1_continuity_across_zero_slip() {
        // Finite-difference slope agreement from both sides within 1e-6 rel.
        let p = rear();
        let fz = 8800.0;
        let h = 1e-7;
        // d fy / d alpha across alpha = 0 at a few kappa values.
        for &kappa in &[0.0, 0.1, 0.5] {
            let right = (rear_combined(h, kappa, fz, &p).unwrap().fy
                - rear_combined(0.0, kappa, fz, &p).unwrap().fy)
                / h;
            let left = (rear_combined(0.0, kappa, fz, &p).unwrap().fy
                - rear_combined(-h, kappa, fz, &p).unwrap().fy)
                / h;
            assert_relative_eq!(left, right, max_relative = 1e-6);
        }
        // d fx / d kappa across kappa = 0 at a few alpha values.
        for &alpha in &[0.0, 0.05, 0.3] {
            let right = (rear_combined(alpha, h, fz, &p).unwrap().fx
                - rear_combined(alpha, 0.0, fz, &p).unwrap().fx)
                / h;
            let left = (rear_combined(alpha, 0.0, fz, &p).unwrap().fx
                - rear_combined(alpha, -h, fz, &p).unwrap().fx)
                / h;
            assert_relative_eq!(left, right, max_relative = 1e-6);
        }
    }

    #[test]
    fn front_and_rear_pure_lateral_agree_with_matched_coefficients() {
        // Sanity link: rear pure lateral at kappa=0 vs the simplified front
        // curve with matched B, C, D agree within 2% below the peak.
        let r = rear();
        let fz = r.fz_nom;
        let f = SimplifiedTyreParams {
            b: r.by,
            c: r.cy,
            d: r.mu_y * fz,
            fz_nom: r.fz_nom,
            load_sens: r.load_sens,
        };
        let alpha_peak = ((std::f64::consts::FRAC_PI_2 / r.cy).tan()) / r.by;
        let mut a = 0.005;
        while a < alpha_peak {
            let fy_front = front_lateral(a, fz, &f).unwrap();
            let fy_rear = rear_combined(a, 0.0, fz, &r).unwrap().fy;
            assert!(
                (fy_front - fy_rear).abs() <= 0.02 * fy_front.abs().max(fy_rear.abs()),
                "curves deviate more than 2% at alpha={a}: front={fy_front} rear={fy_rear}"
            );
            a += 0.005;
        }
    }

    #[test]
    fn slip_ratio_reference_points() {
        let r_e = 0.33;
        // Free rolling.
        assert_eq!(slip_ratio(10.0 / r_e, 10.0, r_e), 0.0);
        // Locked wheel.
        assert_eq!(slip_ratio(0.0, 10.0, r_e), -1.0);
        // omega * r_e = 2 v.
        assert_relative_eq!(slip_ratio(20.0 / r_e, 10.0, r_e), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn ellipse_derate_matches_pure_curve_at_zero_fx() {
        let p = rear();
        for &alpha in &[-0.4, -0.1, 0.05, 0.3] {
            let derated = rear_lateral_under_fx(alpha, 0.0, 8800.0, &p).unwrap();
            let pure = rear_combined(alpha, 0.0, 8800.0, &p).unwrap().fy;
            assert_relative_eq!(derated, pure, max_relative = 1e-12);
        }
    }

    #[test]
    fn ellipse_derate_partials_match_finite_differences() {
        let p = rear();
        let pts = [
            (0.2, 2000.0, 8800.0),
            (-0.35, 5000.0, 7000.0),
            (0.05, -1500.0, 10_000.0),
            (0.45, 7000.0, 9000.0),
        ];
        for &(alpha, fx, fz) in &pts {
            let (da, dfx, dfz) = rear_lateral_under_fx_partials(alpha, fx, fz, &p);
            let h = 1e-5;
            let fd_a = (rear_lateral_under_fx(alpha + h, fx, fz, &p).unwrap()
                - rear_lateral_under_fx(alpha - h, fx, fz, &p).unwrap())
                / (2.0 * h);
            let hf = 1e-2;
            let fd_fx = (rear_lateral_under_fx(alpha, fx + hf, fz, &p).unwrap()
                - rear_lateral_under_fx(alpha, fx - hf, fz, &p).unwrap())
                / (2.0 * hf);
            let fd_fz = (rear_lateral_under_fx(alpha, fx, fz + hf, &p).unwrap()
                - rear_lateral_under_fx(alpha, fx, fz - hf, &p).unwrap())
                / (2.0 * hf);
            assert_relative_eq!(da, fd_a, max_relative = 1e-6, epsilon = 1e-8);
            assert_relative_eq!(dfx, fd_fx, max_relative = 1e-6, epsilon = 1e-8);
            assert_relative_eq!(dfz, fd_fz, max_relative = 1e-5, epsilon = 1e-8);
        }
    }

    proptest! {
        #[test]
        fn lateral_maps_are_odd(alpha in -1.5f64..1.5, fz in 2000.0f64..14_000.0) {
            let fy_pos = front_lateral(alpha, fz, &front()).unwrap();
            let fy_neg = front_lateral(-alpha, fz, &front()).unwrap();
            prop_assert!((fy_pos + fy_neg).abs() <= 1e-12 * fy_pos.abs().max(1.0));
            let r = rear_combined(alpha, 0.3, fz, &rear()).unwrap();
            let rm = rear_combined(-alpha, 0.3, fz, &rear()).unwrap();
            prop_assert!((r.fy + rm.fy).abs() <= 1e-12 * r.fy.abs().max(1.0));
            prop_assert!((r.fx - rm.fx).abs() <= 1e-12 * r.fx.abs().max(1.0));
        }

        #[test]
        fn slip_ratio_free_rolling_is_zero(omega in 1.0f64..200.0, r_e in 0.2f64..0.4) {
            let v = omega * r_e;
            prop_assert!(slip_ratio(omega, v, r_e).abs() < 1e-12);
        }

        #[test]
        fn friction_circle_random_inputs(
            alpha in -1.2f64..1.2,
            kappa in -1.0f64..4.0,
            fz in 2000.0f64..14_000.0,
        ) {
            let p = rear();
            let f = rear_combined(alpha, kappa, fz, &p).unwrap();
            let bound = 1.01 * p.mu_x_eff(fz).max(p.mu_y_eff(fz)) * fz;
            prop_assert!(f.fx.hypot(f.fy) <= bound);
        }
    }
}
