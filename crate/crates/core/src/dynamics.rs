//! Continuous-time single-track vehicle model with Frenet path kinematics,
//! quasi-static load transfer, RK4 integration and analytic linearisation.
//! This is the shared prediction model for the equilibrium solver and the
//! NMPC.
//!
//! # Sign conventions (used everywhere)
//!
//! ISO body frame: x forward, y left, z up. Positive steering `delta` is a
//! left steer, positive yaw rate `r` is a left (counter-clockwise) turn,
//! positive sideslip `beta` places the velocity vector left of the heading.
//! Positive path curvature `K` bends left and positive `e_y` is left of the
//! path; `psi` is the heading error to the path tangent.
//!
//! Slip angles are `alpha_i = delta_i - atan(v_y,axle / v_x,axle)`: positive
//! when the wheel points left of its own velocity, which produces a positive
//! (leftward) tyre force. Under these conventions a sustained left-hand drift
//! (`r > 0`) holds negative sideslip and negative (countersteered) steering.
//!
//! The rear axle is driven; the front axle rolls free (`F_xF = 0`), and the
//! rear longitudinal force follows from the quasi-static wheel balance
//! `F_xR = T_R / r_e`. The rear lateral force is the pure Magic Formula curve
//! derated by the friction-ellipse utilisation of `F_xR`, so the prediction
//! model needs no wheel-speed state.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tyre::{
    front_lateral, front_lateral_d_alpha, rear_lateral_under_fx, rear_lateral_under_fx_partials,
    Mf52TyreParams, SimplifiedTyreParams, TyreError,
};

/// Minimum operating speed of the prediction model, m/s.
pub const V_FLOOR: f64 = 0.5;
/// Guard for the Frenet geometric singularity `1 - e_y K`.
pub const EPS_GEOM: f64 = 1e-3;

/// State vector indices, shared with the NMPC transcription.
pub const IDX_V: usize = 0;
pub const IDX_BETA: usize = 1;
pub const IDX_R: usize = 2;
pub const IDX_PSI: usize = 3;
pub const IDX_EY: usize = 4;
pub const IDX_SX: usize = 5;
pub const IDX_DELTA: usize = 6;

pub const N_STATES: usize = 7;
pub const N_INPUTS: usize = 2;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("invalid state: speed {0} m/s is not positive")]
    InvalidSpeed(f64),
    #[error("geometric singularity: 1 - e_y * K = {0} <= {EPS_GEOM}")]
    SingularGeometry(f64),
    #[error("time step {0} s outside (0, 0.05]")]
    InvalidTimeStep(f64),
    #[error("non-finite state or input")]
    NonFinite,
    #[error(transparent)]
    Tyre(#[from] TyreError),
}

/// Vehicle and tyre parameters of the prediction model.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VehicleParams {
    /// Mass, kg.
    pub m: f64,
    /// Yaw inertia, kg m^2.
    pub iz: f64,
    /// CoG to front axle, m.
    pub a: f64,
    /// CoG to rear axle, m.
    pub b: f64,
    /// CoG height, m.
    pub h: f64,
    /// Effective wheel radius, m.
    pub r_e: f64,
    /// Wheel spin inertia, kg m^2 (per wheel; used by the plant).
    pub i_w: f64,
    /// Gravity, m/s^2.
    pub g: f64,
    /// Front tyre (simplified Magic Formula).
    pub front_tyre: SimplifiedTyreParams,
    /// Rear tyre (combined-slip Magic Formula).
    pub rear_tyre: Mf52TyreParams,
}

impl VehicleParams {
    pub fn wheelbase(&self) -> f64 {
        self.a + self.b
    }

    /// Scale both axles' friction by a surface factor.
    pub fn scaled_mu(&self, scale: f64) -> Self {
        Self {
            front_tyre: self.front_tyre.scaled_mu(scale),
            rear_tyre: self.rear_tyre.scaled_mu(scale),
            ..self.clone()
        }
    }
}

impl Default for VehicleParams {
    fn default() -> Self {
        // Approximates a ~1800 kg, ~2.85 m wheelbase rear-driven sports sedan.
        Self {
            m: 1800.0,
            iz: 3400.0,
            a: 1.40,
            b: 1.45,
            h: 0.45,
            r_e: 0.33,
            i_w: 1.5,
            g: 9.81,
            front_tyre: SimplifiedTyreParams::default(),
            rear_tyre: Mf52TyreParams::default(),
        }
    }
}

/// Single-track dynamic and Frenet states, with steering as augmented state.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    /// Absolute velocity, m/s.
    pub v: f64,
    /// Sideslip angle, rad.
    pub beta: f64,
    /// Yaw rate, rad/s.
    pub r: f64,
    /// Heading error to the path, rad.
    pub psi: f64,
    /// Lateral path deviation, m.
    pub e_y: f64,
    /// Distance along the path, m.
    pub s_x: f64,
    /// Steering angle, rad.
    pub delta: f64,
}

impl VehicleState {
    pub fn to_vector(&self) -> SVector<f64, N_STATES> {
        SVector::from([self.v, self.beta, self.r, self.psi, self.e_y, self.s_x, self.delta])
    }

    pub fn from_vector(x: &SVector<f64, N_STATES>) -> Self {
        Self { v: x[0], beta: x[1], r: x[2], psi: x[3], e_y: x[4], s_x: x[5], delta: x[6] }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }

    /// Left/right mirror image (negates beta, r, psi, e_y, delta).
    pub fn mirrored(&self) -> Self {
        Self {
            v: self.v,
            beta: -self.beta,
            r: -self.r,
            psi: -self.psi,
            e_y: -self.e_y,
            s_x: self.s_x,
            delta: -self.delta,
        }
    }
}

/// Control rates: steering rate and rear-axle drive torque.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlRates {
    /// Steering rate, rad/s.
    pub ddelta: f64,
    /// Rear axle drive torque, N m.
    pub torque: f64,
}

/// Time derivative of every [`VehicleState`] field.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StateDerivative {
    pub v: f64,
    pub beta: f64,
    pub r: f64,
    pub psi: f64,
    pub e_y: f64,
    pub s_x: f64,
    pub delta: f64,
}

impl StateDerivative {
    pub fn to_vector(&self) -> SVector<f64, N_STATES> {
        SVector::from([self.v, self.beta, self.r, self.psi, self.e_y, self.s_x, self.delta])
    }
}

/// Axle slip angles and wheel-centre longitudinal speeds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlipKinematics {
    pub alpha_f: f64,
    pub alpha_r: f64,
    /// Body-frame longitudinal speed at the front axle, m/s.
    pub v_wheel_f: f64,
    /// Body-frame longitudinal speed at the rear axle, m/s.
    pub v_wheel_r: f64,
}

/// Axle slip kinematics of the single-track model.
///
/// `alpha_F = delta - atan((V sin b + a r)/(V cos b))`,
/// `alpha_R = -atan((V sin b - b r)/(V cos b))`; the wheel-centre speeds are
/// the body-frame longitudinal velocity component, identical at both axles.
pub fn slip_kinematics(
    x: &VehicleState,
    params: &VehicleParams,
) -> Result<SlipKinematics, DynamicsError> {
    if !(x.v > 0.0) {
        return Err(DynamicsError::InvalidSpeed(x.v));
    }
    let u_b = x.v * x.beta.cos();
    let alpha_f = x.delta - ((x.v * x.beta.sin() + params.a * x.r) / u_b).atan();
    let alpha_r = -((x.v * x.beta.sin() - params.b * x.r) / u_b).atan();
    Ok(SlipKinematics { alpha_f, alpha_r, v_wheel_f: u_b, v_wheel_r: u_b })
}

/// Front/rear vertical loads with quasi-static longitudinal transfer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxleLoads {
    pub front: f64,
    pub rear: f64,
    /// True when the transfer hit the 5%-of-static clamp.
    pub clamped: bool,
}

/// Quasi-static axle loads: `Fz_F = m(g b - a_x h)/L`, `Fz_R = m(g a + a_x h)/L`.
/// Each axle is clamped at 5% of its static value (conserving the total) and
/// the clamp is flagged.
pub fn axle_loads(a_x: f64, params: &VehicleParams) -> AxleLoads {
    let l = params.wheelbase();
    let static_f = params.m * params.g * params.b / l;
    let static_r = params.m * params.g * params.a / l;
    let transfer = params.m * a_x * params.h / l;
    let total = static_f + static_r;
    let mut front = static_f - transfer;
    let mut rear = static_r + transfer;
    let mut clamped = false;
    if front < 0.05 * static_f {
        front = 0.05 * static_f;
        rear = total - front;
        clamped = true;
    } else if rear < 0.05 * static_r {
        rear = 0.05 * static_r;
        front = total - rear;
        clamped = true;
    }
    AxleLoads { front, rear, clamped }
}

/// Tyre forces and every partial needed for the analytic Jacobian.
struct ForceEval {
    fy_f: f64,
    fx_r: f64,
    fy_r: f64,
    // Partials with respect to (v, beta, r, delta, torque).
    fy_f_d: [f64; 5],
    fy_r_d: [f64; 5],
    // d fx_r / d torque.
    fx_r_dt: f64,
}

fn eval_forces(
    x: &VehicleState,
    u: &ControlRates,
    params: &VehicleParams,
) -> Result<ForceEval, DynamicsError> {
    let l = params.wheelbase();
    let u_b = x.v * x.beta.cos();
    let (sb, cb) = x.beta.sin_cos();

    // Slip angles and their partials.
    let tf = (x.v * sb + params.a * x.r) / u_b;
    let tr = (x.v * sb - params.b * x.r) / u_b;
    let df = 1.0 / (1.0 + tf * tf);
    let dr = 1.0 / (1.0 + tr * tr);
    let alpha_f = x.delta - tf.atan();
    let alpha_r = -tr.atan();

    let tf_v = -params.a * x.r / (x.v * x.v * cb);
    let tf_b = (1.0 + (params.a * x.r / x.v) * sb) / (cb * cb);
    let tf_r = params.a / u_b;
    let tr_v = params.b * x.r / (x.v * x.v * cb);
    let tr_b = (1.0 - (params.b * x.r / x.v) * sb) / (cb * cb);
    let tr_r = -params.b / u_b;

    let af_d = [-df * tf_v, -df * tf_b, -df * tf_r, 1.0, 0.0];
    let ar_d = [-dr * tr_v, -dr * tr_b, -dr * tr_r, 0.0, 0.0];

    // Quasi-static loads from the drive-induced longitudinal acceleration.
    let a_x = u.torque / (params.r_e * params.m);
    let loads = axle_loads(a_x, params);
    // d Fz / d torque (zero while the 5% clamp is active).
    let (fz_f_dt, fz_r_dt) = if loads.clamped {
        (0.0, 0.0)
    } else {
        (-params.h / (params.r_e * l), params.h / (params.r_e * l))
    };

    // Front lateral.
    let fy_f = front_lateral(alpha_f, loads.front, &params.front_tyre)?;
    let fy_f_da = front_lateral_d_alpha(alpha_f, loads.front, &params.front_tyre);
    let fy_f_dfz = params.front_tyre.d * (1.0 - params.front_tyre.load_sens)
        / params.front_tyre.fz_nom
        * (params.front_tyre.c * (params.front_tyre.b * alpha_f).atan()).sin();
    let mut fy_f_d = [0.0; 5];
    for i in 0..5 {
        fy_f_d[i] = fy_f_da * af_d[i];
    }
    fy_f_d[4] += fy_f_dfz * fz_f_dt;

    // Rear: longitudinal from torque balance, lateral from the ellipse derate.
    let fx_r = u.torque / params.r_e;
    let fx_r_dt = 1.0 / params.r_e;
    let fy_r = rear_lateral_under_fx(alpha_r, fx_r, loads.rear, &params.rear_tyre)?;
    let (fy_r_da, fy_r_dfx, fy_r_dfz) =
        rear_lateral_under_fx_partials(alpha_r, fx_r, loads.rear, &params.rear_tyre);
    let mut fy_r_d = [0.0; 5];
    for i in 0..5 {
        fy_r_d[i] = fy_r_da * ar_d[i];
    }
    fy_r_d[4] += fy_r_dfx * fx_r_dt + fy_r_dfz * fz_r_dt;

    Ok(ForceEval { fy_f, fx_r, fy_r, fy_f_d, fy_r_d, fx_r_dt })
}

/// Continuous-time derivative of the full state.
///
/// Body dynamics keep the front longitudinal force symbolic but feed zero
/// (free-rolling front axle on a rear-driven vehicle).
pub fn derivative(
    x: &VehicleState,
    u: &ControlRates,
    kappa_path: f64,
    params: &VehicleParams,
) -> Result<StateDerivative, DynamicsError> {
    if !x.is_finite() || !u.ddelta.is_finite() || !u.torque.is_finite() || !kappa_path.is_finite() {
        return Err(DynamicsError::NonFinite);
    }
    if !(x.v > 0.0) {
        return Err(DynamicsError::InvalidSpeed(x.v));
    }
    let den = 1.0 - x.e_y * kappa_path;
    if den <= EPS_GEOM {
        return Err(DynamicsError::SingularGeometry(den));
    }

    let f = eval_forces(x, u, params)?;
    let (sb, cb) = x.beta.sin_cos();
    let (sdb, cdb) = (x.delta - x.beta).sin_cos();
    let cd = x.delta.cos();

    let v_dot = (-f.fy_f * sdb + f.fx_r * cb + f.fy_r * sb) / params.m;
    let beta_dot =
        (f.fy_f * cdb - f.fx_r * sb + f.fy_r * cb) / (params.m * x.v) - x.r;
    let r_dot = (params.a * f.fy_f * cd - params.b * f.fy_r) / params.iz;

    let (spb, cpb) = (x.psi + x.beta).sin_cos();
    let psi_dot = x.r - kappa_path * x.v * cpb / den;
    let e_y_dot = x.v * spb;
    let s_x_dot = x.v * cpb / den;

    Ok(StateDerivative {
        v: v_dot,
        beta: beta_dot,
        r: r_dot,
        psi: psi_dot,
        e_y: e_y_dot,
        s_x: s_x_dot,
        delta: u.ddelta,
    })
}

/// Analytic Jacobians `(A, B)` of [`derivative`] with respect to state and
/// input.
pub fn linearize(
    x: &VehicleState,
    u: &ControlRates,
    kappa_path: f64,
    params: &VehicleParams,
) -> Result<(SMatrix<f64, N_STATES, N_STATES>, SMatrix<f64, N_STATES, N_INPUTS>), DynamicsError> {
    if !(x.v > 0.0) {
        return Err(DynamicsError::InvalidSpeed(x.v));
    }
    let den = 1.0 - x.e_y * kappa_path;
    if den <= EPS_GEOM {
        return Err(DynamicsError::SingularGeometry(den));
    }
    let f = eval_forces(x, u, params)?;

    let m = params.m;
    let iz = params.iz;
    let (sb, cb) = x.beta.sin_cos();
    let (sdb, cdb) = (x.delta - x.beta).sin_cos();
    let (sd, cd) = x.delta.sin_cos();

    let mut a_mat = SMatrix::<f64, N_STATES, N_STATES>::zeros();
    let mut b_mat = SMatrix::<f64, N_STATES, N_INPUTS>::zeros();

    // Columns of the force partial arrays: (v, beta, r, delta, torque).
    let col_state = [IDX_V, IDX_BETA, IDX_R, IDX_DELTA];

    // V_dot row.
    for (k, &j) in col_state.iter().enumerate() {
        a_mat[(IDX_V, j)] = (-f.fy_f_d[k] * sdb + f.fy_r_d[k] * sb) / m;
    }
    a_mat[(IDX_V, IDX_BETA)] +=
        (f.fy_f * cdb - f.fx_r * sb + f.fy_r * cb) / m;
    a_mat[(IDX_V, IDX_DELTA)] += -f.fy_f * cdb / m;
    b_mat[(IDX_V, 1)] = (-f.fy_f_d[4] * sdb + f.fx_r_dt * cb + f.fy_r_d[4] * sb) / m;

    // beta_dot row.
    let n_val = f.fy_f * cdb - f.fx_r * sb + f.fy_r * cb;
    let mv = m * x.v;
    for (k, &j) in col_state.iter().enumerate() {
        a_mat[(IDX_BETA, j)] = (f.fy_f_d[k] * cdb + f.fy_r_d[k] * cb) / mv;
    }
    a_mat[(IDX_BETA, IDX_V)] += -n_val / (mv * x.v);
    a_mat[(IDX_BETA, IDX_BETA)] += (f.fy_f * sdb - f.fx_r * cb - f.fy_r * sb) / mv;
    a_mat[(IDX_BETA, IDX_R)] += -1.0;
    a_mat[(IDX_BETA, IDX_DELTA)] += -f.fy_f * sdb / mv;
    b_mat[(IDX_BETA, 1)] = (f.fy_f_d[4] * cdb - f.fx_r_dt * sb + f.fy_r_d[4] * cb) / mv;

    // r_dot row.
    for (k, &j) in col_state.iter().enumerate() {
        a_mat[(IDX_R, j)] = (params.a * f.fy_f_d[k] * cd - params.b * f.fy_r_d[k]) / iz;
    }
    a_mat[(IDX_R, IDX_DELTA)] += -params.a * f.fy_f * sd / iz;
    b_mat[(IDX_R, 1)] = (params.a * f.fy_f_d[4] * cd - params.b * f.fy_r_d[4]) / iz;

    // Frenet rows.
    let (spb, cpb) = (x.psi + x.beta).sin_cos();
    let k_p = kappa_path;
    a_mat[(IDX_PSI, IDX_V)] = -k_p * cpb / den;
    a_mat[(IDX_PSI, IDX_BETA)] = k_p * x.v * spb / den;
    a_mat[(IDX_PSI, IDX_R)] = 1.0;
    a_mat[(IDX_PSI, IDX_PSI)] = k_p * x.v * spb / den;
    a_mat[(IDX_PSI, IDX_EY)] = -k_p * k_p * x.v * cpb / (den * den);

    a_mat[(IDX_EY, IDX_V)] = spb;
    a_mat[(IDX_EY, IDX_BETA)] = x.v * cpb;
    a_mat[(IDX_EY, IDX_PSI)] = x.v * cpb;

    a_mat[(IDX_SX, IDX_V)] = cpb / den;
    a_mat[(IDX_SX, IDX_BETA)] = -x.v * spb / den;
    a_mat[(IDX_SX, IDX_PSI)] = -x.v * spb / den;
    a_mat[(IDX_SX, IDX_EY)] = k_p * x.v * cpb / (den * den);

    // delta_dot row.
    b_mat[(IDX_DELTA, 0)] = 1.0;

    Ok((a_mat, b_mat))
}

/// One classical 4th-order Runge-Kutta step; deterministic and
/// bit-reproducible for identical inputs.
pub fn step_rk4(
    x: &VehicleState,
    u: &ControlRates,
    kappa_path: f64,
    dt: f64,
    params: &VehicleParams,
) -> Result<VehicleState, DynamicsError> {
    if !(dt > 0.0 && dt <= 0.05) {
        return Err(DynamicsError::InvalidTimeStep(dt));
    }
    let x0 = x.to_vector();
    let k1 = derivative(x, u, kappa_path, params)?.to_vector();
    let x1 = VehicleState::from_vector(&(x0 + 0.5 * dt * k1));
    let k2 = derivative(&x1, u, kappa_path, params)?.to_vector();
    let x2 = VehicleState::from_vector(&(x0 + 0.5 * dt * k2));
    let k3 = derivative(&x2, u, kappa_path, params)?.to_vector();
    let x3 = VehicleState::from_vector(&(x0 + dt * k3));
    let k4 = derivative(&x3, u, kappa_path, params)?.to_vector();
    let next = x0 + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    Ok(VehicleState::from_vector(&next))
}

/// RK4 step together with the exact discrete sensitivities of the step map,
/// `(x_next, d x_next/d x, d x_next/d u)`, obtained by chaining the analytic
/// continuous-time Jacobians through the four stages.
#[allow(clippy::type_complexity)]
pub fn step_rk4_sens(
    x: &VehicleState,
    u: &ControlRates,
    kappa_path: f64,
    dt: f64,
    params: &VehicleParams,
) -> Result<
    (VehicleState, SMatrix<f64, N_STATES, N_STATES>, SMatrix<f64, N_STATES, N_INPUTS>),
    DynamicsError,
> {
    if !(dt > 0.0 && dt <= 0.05) {
        return Err(DynamicsError::InvalidTimeStep(dt));
    }
    let eye = SMatrix::<f64, N_STATES, N_STATES>::identity();
    let x0 = x.to_vector();

    let k1 = derivative(x, u, kappa_path, params)?.to_vector();
    let (a1, b1) = linearize(x, u, kappa_path, params)?;
    let (ka1, kb1) = (a1, b1);

    let xs2 = VehicleState::from_vector(&(x0 + 0.5 * dt * k1));
    let k2 = derivative(&xs2, u, kappa_path, params)?.to_vector();
    let (a2, b2) = linearize(&xs2, u, kappa_path, params)?;
    let ka2 = a2 * (eye + 0.5 * dt * ka1);
    let kb2 = a2 * (0.5 * dt * kb1) + b2;

    let xs3 = VehicleState::from_vector(&(x0 + 0.5 * dt * k2));
    let k3 = derivative(&xs3, u, kappa_path, params)?.to_vector();
    let (a3, b3) = linearize(&xs3, u, kappa_path, params)?;
    let ka3 = a3 * (eye + 0.5 * dt * ka2);
    let kb3 = a3 * (0.5 * dt * kb2) + b3;

    let xs4 = VehicleState::from_vector(&(x0 + dt * k3));
    let k4 = derivative(&xs4, u, kappa_path, params)?.to_vector();
    let (a4, b4) = linearize(&xs4, u, kappa_path, params)?;
    let ka4 = a4 * (eye + dt * ka3);
    let kb4 = a4 * (dt * kb3) + b4;

    let next = x0 + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    let a_d = eye + dt / 6.0 * (ka1 + 2.0 * ka2 + 2.0 * ka3 + ka4);
    let b_d = dt / 6.0 * (kb1 + 2.0 * kb2 + 2.0 * kb3 + kb4);
    Ok((VehicleState::from_vector(&next), a_d, b_d))
}
