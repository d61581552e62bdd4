//! Offline computation of steady-state drifting equilibria over a
//! (sideslip, radius) grid by damped nonlinear least-squares with
//! continuation, plus regime classification and curvature-indexed lookup.
//!
//! Grid labels are sideslip magnitudes. The canonical map is built for
//! left-hand circles (`r = V/R > 0`), where a drifting attitude carries
//! negative ISO sideslip, so a cell labelled `beta_des` stores an equilibrium
//! with `beta = -beta_des`. Right-hand equilibria are the exact mirror and
//! are selected in [`lookup`] by the sign of the reference curvature.

use std::io::{BufRead, Write};

use nalgebra::{SMatrix, SVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    derivative, linearize, slip_kinematics, ControlRates, VehicleParams, VehicleState, IDX_BETA,
    IDX_DELTA, IDX_R, IDX_V,
};
use crate::lm::{self, LmOptions};
use crate::tyre::rear_combined;

/// Residual 2-norm below which a solved point is accepted.
pub const RESIDUAL_ACCEPT: f64 = 1e-8;
/// Longitudinal utilisation above which a point is physically suspect: the
/// tyre cannot transmit the demanded steady drive force.
const UTILISATION_LIMIT: f64 = 0.95;

#[derive(Debug, Error)]
pub enum EquilibriaError {
    #[error("equilibrium solver diverged: {0}")]
    SolverFailure(#[from] lm::LmError),
    #[error("grid must be non-empty and strictly monotone")]
    BadGrid,
    #[error("map build failed: {infeasible} of {total} cells infeasible (> 25%)")]
    MapBuild { infeasible: usize, total: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed map data: {0}")]
    Parse(String),
}

/// Operating regime of an equilibrium, following the force-peak taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    Linear,
    Transient,
    FullDrift,
}

impl Regime {
    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::Linear => "linear",
            Regime::Transient => "transient",
            Regime::FullDrift => "full_drift",
        }
    }

    fn from_str(s: &str) -> Option<Self> {
        match s {
            "linear" => Some(Regime::Linear),
            "transient" => Some(Regime::Transient),
            "full_drift" => Some(Regime::FullDrift),
            _ => None,
        }
    }
}

/// One steady-state solution with solver metadata.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Equilibrium {
    /// Speed, m/s.
    pub v: f64,
    /// ISO sideslip, rad (negative in a left-hand drift).
    pub beta: f64,
    /// Yaw rate, rad/s.
    pub r: f64,
    /// Front wheel speed, rad/s (free rolling).
    pub omega_f: f64,
    /// Rear wheel speed, rad/s (torque-balance readout).
    pub omega_r: f64,
    /// Steering angle, rad.
    pub delta: f64,
    /// Rear axle drive torque, N m.
    pub torque: f64,
    /// Rear slip ratio consistent with the drive torque.
    pub kappa_r: f64,
    /// Front lateral force, N.
    pub fy_f: f64,
    /// Rear lateral force, N.
    pub fy_r: f64,
    /// Rear longitudinal force, N.
    pub fx_r: f64,
    /// Front axle load, N.
    pub fz_f: f64,
    /// Rear axle load, N.
    pub fz_r: f64,
    /// Dimensionless stationarity residual: 2-norm of
    /// `(V_dot / g, beta_dot, r_dot, path consistency)` at the point.
    pub residual_norm: f64,
    /// True when the residual met [`RESIDUAL_ACCEPT`] and the utilisation
    /// check passed.
    pub accepted: bool,
    pub regime: Regime,
}

impl Equilibrium {
    /// The vehicle state this equilibrium corresponds to, centred on the path.
    pub fn state(&self) -> VehicleState {
        VehicleState {
            v: self.v,
            beta: self.beta,
            r: self.r,
            psi: -self.beta,
            e_y: 0.0,
            s_x: 0.0,
            delta: self.delta,
        }
    }

    pub fn controls(&self) -> ControlRates {
        ControlRates { ddelta: 0.0, torque: self.torque }
    }

    /// Path curvature this equilibrium turns at (signed by yaw rate).
    pub fn curvature(&self) -> f64 {
        self.r / self.v
    }

    /// Left/right mirror: flips sideslip, yaw rate and steering; wheel speeds
    /// and force magnitudes are preserved.
    pub fn mirrored(&self) -> Self {
        Self {
            beta: -self.beta,
            r: -self.r,
            delta: -self.delta,
            fy_f: -self.fy_f,
            fy_r: -self.fy_r,
            ..*self
        }
    }
}

/// Peak loci over the accepted cells of a map: indices `(i_beta, i_radius)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeakLoci {
    pub drive_torque: (usize, usize),
    pub rear_lateral: (usize, usize),
    pub front_lateral: (usize, usize),
}

/// Dense grid of equilibria over (sideslip magnitude, radius).
#[derive(Debug, Clone)]
pub struct EquilibriumMap {
    /// Sideslip labels, rad; strictly monotone, uniform sign.
    pub beta_grid: Vec<f64>,
    /// Path radii, m; strictly increasing.
    pub radius_grid: Vec<f64>,
    /// Row-major `[i_beta * radius_grid.len() + i_radius]`; `None` marks a
    /// solver failure, unaccepted cells carry their residual.
    pub cells: Vec<Option<Equilibrium>>,
    pub peaks: Option<PeakLoci>,
}

/// Solver knobs and box bounds for the equilibrium search.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EquilibriumSolveConfig {
    pub v_min: f64,
    pub v_max: f64,
    pub r_max: f64,
    pub delta_max: f64,
    pub torque_min: f64,
    pub torque_max: f64,
    pub max_iters: usize,
    pub damping_init: f64,
}

impl Default for EquilibriumSolveConfig {
    fn default() -> Self {
        Self {
            v_min: 1.0,
            v_max: 45.0,
            r_max: 3.0,
            delta_max: 0.6,
            torque_min: -1500.0,
            torque_max: 4000.0,
            max_iters: 200,
            damping_init: 1e-3,
        }
    }
}

/// Pure-slip peak locations of the rear tyre, used for classification.
#[derive(Debug, Clone, Copy)]
pub struct RegimeContext {
    pub alpha_peak: f64,
    pub kappa_peak: f64,
}

impl RegimeContext {
    pub fn from_params(params: &VehicleParams) -> Self {
        let p = params.rear_tyre;
        let fz = p.fz_nom;
        let (alpha_peak, _) =
            crate::tyre::scan_peak(|a| rear_combined(a, 0.0, fz, &p).unwrap().fy, 1.0, 1e-4);
        let (kappa_peak, _) =
            crate::tyre::scan_peak(|k| rear_combined(0.0, k, fz, &p).unwrap().fx, 1.0, 1e-4);
        Self { alpha_peak, kappa_peak }
    }
}

/// Rear slip ratio transmitting `fx` at the given slip angle and load:
/// smallest-magnitude root of the combined longitudinal curve, found by a
/// deterministic scan-and-bisect. Saturates at the scan boundary when the
/// demand exceeds what the tyre transmits.
pub fn kappa_from_drive_force(
    alpha_r: f64,
    fx: f64,
    fz: f64,
    params: &VehicleParams,
) -> f64 {
    if fx.abs() < 1e-9 {
        return 0.0;
    }
    let p = &params.rear_tyre;
    let g = |k: f64| rear_combined(alpha_r, k, fz, p).map(|f| f.fx - fx).unwrap_or(f64::NAN);
    let (kappa_end, n_scan) = if fx > 0.0 { (4.0, 1000) } else { (-1.0, 250) };
    let step = kappa_end / n_scan as f64;
    let mut lo = 0.0;
    let mut g_lo = g(0.0);
    for i in 1..=n_scan {
        let hi = step * i as f64;
        let g_hi = g(hi);
        if g_lo.signum() != g_hi.signum() {
            // Bisect to machine-level width.
            let (mut a, mut b) = (lo, hi);
            let mut g_a = g_lo;
            for _ in 0..80 {
                let mid = 0.5 * (a + b);
                let g_mid = g(mid);
                if g_mid == 0.0 {
                    return mid;
                }
                if g_a.signum() != g_mid.signum() {
                    b = mid;
                } else {
                    a = mid;
                    g_a = g_mid;
                }
            }
            return 0.5 * (a + b);
        }
        lo = hi;
        g_lo = g_hi;
    }
    kappa_end
}

/// Row weights balancing the stacked residual scales for the solver
/// (V_dot in m/s^2 vs angular rates in 1/s^2 and the path row in 1/s).
const ROW_WEIGHTS: [f64; 4] = [1.0, 10.0, 10.0, 10.0];

/// Dimensionless residual norm: the speed row is normalised by g so all rows
/// carry comparable 1/s-scale units.
fn dimensionless_norm(res: &SVector<f64, 4>, params: &VehicleParams) -> f64 {
    let scaled = SVector::<f64, 4>::new(res[0] / params.g, res[1], res[2], res[3]);
    scaled.norm()
}

/// Stacked equilibrium residual at a candidate `(v, r, delta, torque)`:
/// the body derivatives from the shared prediction model plus the circular
/// path consistency `r = dir * V / R`. Rows are scaled by [`ROW_WEIGHTS`]
/// when `weighted` is set (the solver path); acceptance uses the raw norm.
fn residual(
    z: &SVector<f64, 4>,
    beta_iso: f64,
    radius: f64,
    dir: f64,
    params: &VehicleParams,
    weighted: bool,
) -> Option<(SVector<f64, 4>, SMatrix<f64, 4, 4>)> {
    let x = VehicleState {
        v: z[0],
        beta: beta_iso,
        r: z[1],
        psi: -beta_iso,
        e_y: 0.0,
        s_x: 0.0,
        delta: z[2],
    };
    let u = ControlRates { ddelta: 0.0, torque: z[3] };
    let k_path = dir / radius;
    let d = derivative(&x, &u, k_path, params).ok()?;
    let (a, b) = linearize(&x, &u, k_path, params).ok()?;
    let mut res = SVector::<f64, 4>::new(d.v, d.beta, d.r, z[1] - dir * z[0] / radius);
    let mut jac = SMatrix::<f64, 4, 4>::zeros();
    for (row, idx) in [(0, IDX_V), (1, IDX_BETA), (2, IDX_R)] {
        jac[(row, 0)] = a[(idx, IDX_V)];
        jac[(row, 1)] = a[(idx, IDX_R)];
        jac[(row, 2)] = a[(idx, IDX_DELTA)];
        jac[(row, 3)] = b[(idx, 1)];
    }
    jac[(3, 0)] = -dir / radius;
    jac[(3, 1)] = 1.0;
    if weighted {
        for i in 0..4 {
            res[i] *= ROW_WEIGHTS[i];
            for j in 0..4 {
                jac[(i, j)] *= ROW_WEIGHTS[i];
            }
        }
    }
    Some((res, jac))
}

/// Kinematic low-slip initial guess for the first cell of a column.
fn kinematic_guess(radius: f64, dir: f64, params: &VehicleParams) -> SVector<f64, 4> {
    let v0 = (0.3 * params.g * radius).sqrt();
    SVector::<f64, 4>::new(v0, dir * v0 / radius, dir * params.wheelbase() / radius, 150.0)
}

/// Solve one steady-state drifting equilibrium.
///
/// `beta_des` is the desired sideslip magnitude label (rad); its sign selects
/// the turn direction (positive = left-hand circle, the canonical map side).
/// The returned ISO sideslip is `-beta_des`. Non-convergence yields an
/// unaccepted point; only a diverged iterate is an error.
pub fn solve_equilibrium(
    beta_des: f64,
    radius: f64,
    guess: Option<&Equilibrium>,
    params: &VehicleParams,
    cfg: &EquilibriumSolveConfig,
) -> Result<Equilibrium, EquilibriaError> {
    let ctx = RegimeContext::from_params(params);
    solve_with_ctx(beta_des, radius, guess, params, cfg, &ctx)
}

fn solve_with_ctx(
    beta_des: f64,
    radius: f64,
    guess: Option<&Equilibrium>,
    params: &VehicleParams,
    cfg: &EquilibriumSolveConfig,
    ctx: &RegimeContext,
) -> Result<Equilibrium, EquilibriaError> {
    let dir = if beta_des >= 0.0 { 1.0 } else { -1.0 };
    let beta_iso = -beta_des;

    let (r_lo, r_hi) = if dir > 0.0 { (1e-3, cfg.r_max) } else { (-cfg.r_max, -1e-3) };
    let lo = SVector::<f64, 4>::new(cfg.v_min, r_lo, -cfg.delta_max, cfg.torque_min);
    let hi = SVector::<f64, 4>::new(cfg.v_max, r_hi, cfg.delta_max, cfg.torque_max);

    let opts = LmOptions {
        max_iters: cfg.max_iters,
        tol_residual: 1e-10,
        damping_init: cfg.damping_init,
        ..Default::default()
    };

    // Deterministic start ladder: the continuation seed first, kinematic
    // guesses with staggered speeds, then countersteered drift attitudes for
    // cold solves deep in the map. The first start that converges to a
    // physically transmittable point wins.
    let kin = kinematic_guess(radius, dir, params);
    let mut starts: Vec<SVector<f64, 4>> = Vec::with_capacity(10);
    if let Some(g) = guess {
        starts.push(SVector::<f64, 4>::new(g.v, g.r, g.delta, g.torque));
    }
    for scale in [1.0, 0.7, 1.3, 0.5, 1.6] {
        let mut s = kin;
        s[0] *= scale;
        s[1] *= scale;
        starts.push(s);
    }
    for (ay_frac, steer, torque) in
        [(0.55, -0.10, 1200.0), (0.70, -0.25, 1800.0), (0.85, -0.35, 2400.0)]
    {
        let v0 = (ay_frac * params.g * radius).sqrt();
        starts.push(SVector::<f64, 4>::new(v0, dir * v0 / radius, dir * steer, torque));
    }

    let mut best: Option<Equilibrium> = None;
    for z0 in starts {
        let sol = lm::solve_box(
            |z| residual(z, beta_iso, radius, dir, params, true),
            z0,
            lo,
            hi,
            &opts,
        )?;
        let raw_norm = residual(&sol.x, beta_iso, radius, dir, params, false)
            .map(|(r, _)| dimensionless_norm(&r, params))
            .unwrap_or(f64::INFINITY);
        let eq = build_equilibrium(&sol.x, beta_iso, raw_norm, params, ctx);
        if eq.accepted {
            return Ok(eq);
        }
        if best.as_ref().map_or(true, |b| eq.residual_norm < b.residual_norm) {
            best = Some(eq);
        }
    }
    Ok(best.expect("at least one start attempted"))
}

fn build_equilibrium(
    z: &SVector<f64, 4>,
    beta_iso: f64,
    residual_norm: f64,
    params: &VehicleParams,
    ctx: &RegimeContext,
) -> Equilibrium {
    let x = VehicleState {
        v: z[0],
        beta: beta_iso,
        r: z[1],
        psi: -beta_iso,
        e_y: 0.0,
        s_x: 0.0,
        delta: z[2],
    };
    let torque = z[3];
    let kin = slip_kinematics(&x, params).expect("positive speed enforced by solver bounds");
    let a_x = torque / (params.r_e * params.m);
    let loads = crate::dynamics::axle_loads(a_x, params);
    let fx_r = torque / params.r_e;
    let kappa_r = kappa_from_drive_force(kin.alpha_r, fx_r, loads.rear, params);
    let fy_f =
        crate::tyre::front_lateral(kin.alpha_f, loads.front, &params.front_tyre).unwrap_or(0.0);
    let fy_r =
        crate::tyre::rear_lateral_under_fx(kin.alpha_r, fx_r, loads.rear, &params.rear_tyre)
            .unwrap_or(0.0);
    let omega_f = kin.v_wheel_f / params.r_e;
    let omega_r = kin.v_wheel_r * (1.0 + kappa_r) / params.r_e;

    let utilisation = fx_r.abs() / (params.rear_tyre.mu_x_eff(loads.rear) * loads.rear);
    // A slip-ratio readout pinned at the scan boundary means the tyre cannot
    // transmit the demanded steady force: reject the point as unphysical.
    let kappa_saturated = kappa_r >= 3.999 || kappa_r <= -0.999;
    let accepted =
        residual_norm < RESIDUAL_ACCEPT && utilisation <= UTILISATION_LIMIT && !kappa_saturated;

    let mut eq = Equilibrium {
        v: z[0],
        beta: beta_iso,
        r: z[1],
        omega_f,
        omega_r,
        delta: z[2],
        torque,
        kappa_r,
        fy_f,
        fy_r,
        fx_r,
        fz_f: loads.front,
        fz_r: loads.rear,
        residual_norm,
        accepted,
        regime: Regime::Transient,
    };
    eq.regime = classify_regime(&eq, ctx, params);
    eq
}

/// Regime taxonomy, checked in order: `linear` while the rear slip angle
/// stays below the lateral peak with steering the same sign as the yaw rate;
/// otherwise `full_drift` once the rear slip ratio reaches the pure
/// longitudinal force peak (ties assigned to `full_drift`); `transient`
/// in between.
pub fn classify_regime(
    eq: &Equilibrium,
    ctx: &RegimeContext,
    params: &VehicleParams,
) -> Regime {
    let kin = slip_kinematics(&eq.state(), params)
        .expect("equilibrium states have positive speed");
    if kin.alpha_r.abs() < ctx.alpha_peak
        && eq.delta.signum() == eq.r.signum()
        && eq.delta != 0.0
    {
        Regime::Linear
    } else if eq.kappa_r.abs() >= ctx.kappa_peak {
        Regime::FullDrift
    } else {
        Regime::Transient
    }
}

/// Build the full equilibrium map with per-column continuation.
///
/// Each radius column is independent (and solved in parallel); within a
/// column the sweep runs from the smallest sideslip magnitude upward, seeding
/// every solve with the previous accepted neighbour. Isolated infeasible
/// cells are tolerated and marked; more than 25% fails the build.
pub fn build_map(
    beta_grid: &[f64],
    radius_grid: &[f64],
    params: &VehicleParams,
    cfg: &EquilibriumSolveConfig,
) -> Result<EquilibriumMap, EquilibriaError> {
    if beta_grid.is_empty() || radius_grid.is_empty() {
        return Err(EquilibriaError::BadGrid);
    }
    if !strictly_monotone(beta_grid) || !strictly_increasing(radius_grid) {
        return Err(EquilibriaError::BadGrid);
    }

    // Sweep order: smallest |beta| first, regardless of grid direction.
    let mut order: Vec<usize> = (0..beta_grid.len()).collect();
    order.sort_by(|&i, &j| beta_grid[i].abs().partial_cmp(&beta_grid[j].abs()).unwrap());

    let ctx = RegimeContext::from_params(params);
    let n_r = radius_grid.len();
    // Continuation sub-steps never exceed one degree, so coarse grids stay on
    // the branch tracked from the low-sideslip end.
    let substep = 1.0f64.to_radians();
    let columns: Vec<Vec<Option<Equilibrium>>> = radius_grid
        .par_iter()
        .map(|&radius| {
            let mut column: Vec<Option<Equilibrium>> = vec![None; beta_grid.len()];
            let mut seed: Option<Equilibrium> = None;
            let mut walked = 0.0f64;
            for &i in &order {
                let target = beta_grid[i];
                let sign = if target >= 0.0 { 1.0 } else { -1.0 };
                while (target.abs() - walked) > substep * 1.001 {
                    walked += substep;
                    if let Ok(eq) =
                        solve_with_ctx(sign * walked, radius, seed.as_ref(), params, cfg, &ctx)
                    {
                        if eq.accepted {
                            seed = Some(eq);
                        }
                    }
                }
                let solved = solve_with_ctx(target, radius, seed.as_ref(), params, cfg, &ctx).ok();
                walked = target.abs();
                if let Some(eq) = &solved {
                    if eq.accepted {
                        seed = Some(*eq);
                    }
                }
                column[i] = solved;
            }
            column
        })
        .collect();

    let mut cells = vec![None; beta_grid.len() * n_r];
    for (j, column) in columns.into_iter().enumerate() {
        for (i, cell) in column.into_iter().enumerate() {
            cells[i * n_r + j] = cell;
        }
    }

    let total = cells.len();
    let infeasible = cells.iter().filter(|c| !matches!(c, Some(e) if e.accepted)).count();
    if infeasible * 4 > total {
        return Err(EquilibriaError::MapBuild { infeasible, total });
    }

    let mut map = EquilibriumMap {
        beta_grid: beta_grid.to_vec(),
        radius_grid: radius_grid.to_vec(),
        cells,
        peaks: None,
    };
    map.peaks = map.locate_peaks();
    Ok(map)
}

fn strictly_monotone(g: &[f64]) -> bool {
    g.windows(2).all(|w| w[1] > w[0]) || g.windows(2).all(|w| w[1] < w[0])
}

fn strictly_increasing(g: &[f64]) -> bool {
    g.windows(2).all(|w| w[1] > w[0])
}

/// Result of a map lookup, flagging hull clamping.
#[derive(Debug, Clone, Copy)]
pub struct LookupResult {
    pub eq: Equilibrium,
    /// True when the query was clamped to the map hull or degraded around
    /// infeasible cells.
    pub saturated: bool,
}

impl EquilibriumMap {
    pub fn cell(&self, i_beta: usize, i_radius: usize) -> Option<&Equilibrium> {
        self.cells[i_beta * self.radius_grid.len() + i_radius].as_ref()
    }

    pub fn accepted_count(&self) -> usize {
        self.cells.iter().filter(|c| matches!(c, Some(e) if e.accepted)).count()
    }

    fn locate_peaks(&self) -> Option<PeakLoci> {
        let mut best_t: Option<(f64, (usize, usize))> = None;
        let mut best_yr: Option<(f64, (usize, usize))> = None;
        let mut best_yf: Option<(f64, (usize, usize))> = None;
        for i in 0..self.beta_grid.len() {
            for j in 0..self.radius_grid.len() {
                if let Some(eq) = self.cell(i, j) {
                    if !eq.accepted {
                        continue;
                    }
                    for (metric, slot) in [
                        (eq.torque, &mut best_t),
                        (eq.fy_r.abs(), &mut best_yr),
                        (eq.fy_f.abs(), &mut best_yf),
                    ] {
                        if slot.map_or(true, |(v, _)| metric > v) {
                            *slot = Some((metric, (i, j)));
                        }
                    }
                }
            }
        }
        Some(PeakLoci {
            drive_torque: best_t?.1,
            rear_lateral: best_yr?.1,
            front_lateral: best_yf?.1,
        })
    }

    /// Curvature hull of the map, `1/R_max ..= 1/R_min`.
    pub fn curvature_range(&self) -> (f64, f64) {
        (
            1.0 / *self.radius_grid.last().unwrap(),
            1.0 / self.radius_grid[0],
        )
    }

    /// Bilinear lookup at a signed reference curvature and sideslip label.
    ///
    /// The sign of `k_ref` selects left/right via mirror symmetry; queries
    /// outside the hull are clamped and flagged. A query exactly on a grid
    /// node returns that node bitwise.
    pub fn lookup(&self, k_ref: f64, beta_des: f64, params: &VehicleParams) -> LookupResult {
        let mirror = k_ref < 0.0;
        let mut saturated = false;

        let (k_min, k_max) = self.curvature_range();
        let mut k_abs = k_ref.abs();
        if k_abs < k_min {
            k_abs = k_min;
            saturated = true;
        } else if k_abs > k_max {
            k_abs = k_max;
            saturated = true;
        }
        let radius = 1.0 / k_abs;

        let mut beta_mag = beta_des.abs();
        let (b_lo, b_hi) = grid_range(&self.beta_grid);
        if beta_mag < b_lo {
            beta_mag = b_lo;
            saturated = true;
        } else if beta_mag > b_hi {
            beta_mag = b_hi;
            saturated = true;
        }

        let (i0, ti) = bracket(&self.beta_grid, beta_mag, true);
        let (j0, tj) = bracket(&self.radius_grid, radius, false);

        // Degrade toward smaller sideslip until the interpolation square is
        // fully accepted.
        let mut i = i0;
        let square = loop {
            let corners = [
                self.cell_accepted(i, j0),
                self.cell_accepted(i + 1, j0),
                self.cell_accepted(i, j0 + 1),
                self.cell_accepted(i + 1, j0 + 1),
            ];
            if corners.iter().all(|c| c.is_some()) {
                break Some((i, corners.map(|c| *c.unwrap())));
            }
            if i == 0 {
                break None;
            }
            i -= 1;
            saturated = true;
        };

        let (i_used, [c00, c10, c01, c11]) = match square {
            Some(s) => s,
            None => {
                // Fall back to the nearest accepted cell in the column pair.
                let eq = self
                    .nearest_accepted(i0, j0)
                    .expect("map with accepted cells");
                return LookupResult {
                    eq: if mirror { eq.mirrored() } else { eq },
                    saturated: true,
                };
            }
        };
        let ti = if i_used == i0 { ti } else { 1.0 };

        let eq = if ti == 0.0 && tj == 0.0 {
            c00
        } else {
            let lerp = |f: fn(&Equilibrium) -> f64| -> f64 {
                let a = f(&c00) * (1.0 - ti) + f(&c10) * ti;
                let b = f(&c01) * (1.0 - ti) + f(&c11) * ti;
                a * (1.0 - tj) + b * tj
            };
            let mut eq = Equilibrium {
                v: lerp(|e| e.v),
                beta: lerp(|e| e.beta),
                r: lerp(|e| e.r),
                omega_f: lerp(|e| e.omega_f),
                omega_r: lerp(|e| e.omega_r),
                delta: lerp(|e| e.delta),
                torque: lerp(|e| e.torque),
                kappa_r: lerp(|e| e.kappa_r),
                fy_f: lerp(|e| e.fy_f),
                fy_r: lerp(|e| e.fy_r),
                fx_r: lerp(|e| e.fx_r),
                fz_f: lerp(|e| e.fz_f),
                fz_r: lerp(|e| e.fz_r),
                residual_norm: 0.0,
                accepted: true,
                regime: c00.regime,
            };
            // Re-verify the interpolated point against the model; where the
            // grid is too coarse for raw bilinear accuracy, polish with a few
            // warm solver iterations at the interpolated sideslip.
            eq.residual_norm = residual_norm_at(&eq, params);
            if eq.residual_norm >= 1e-3 {
                eq = polish(&eq, radius, params);
            }
            eq
        };

        LookupResult { eq: if mirror { eq.mirrored() } else { eq }, saturated }
    }

    fn cell_accepted(&self, i: usize, j: usize) -> Option<&Equilibrium> {
        self.cell(i, j).filter(|e| e.accepted)
    }

    fn nearest_accepted(&self, i0: usize, j0: usize) -> Option<Equilibrium> {
        let mut best: Option<(f64, Equilibrium)> = None;
        for i in 0..self.beta_grid.len() {
            for j in 0..self.radius_grid.len() {
                if let Some(eq) = self.cell_accepted(i, j) {
                    let d = (i as f64 - i0 as f64).powi(2) + (j as f64 - j0 as f64).powi(2);
                    if best.map_or(true, |(bd, _)| d < bd) {
                        best = Some((d, *eq));
                    }
                }
            }
        }
        best.map(|(_, eq)| eq)
    }
}

/// A short warm Levenberg-Marquardt refinement of an interpolated point at
/// its own sideslip value. Keeps the regime label and acceptance flags.
fn polish(eq: &Equilibrium, radius: f64, params: &VehicleParams) -> Equilibrium {
    let dir = if eq.r >= 0.0 { 1.0 } else { -1.0 };
    let beta_iso = eq.beta;
    let opts = LmOptions { max_iters: 5, tol_residual: 1e-10, damping_init: 1e-4, ..Default::default() };
    let big = 1e9;
    let lo = SVector::<f64, 4>::new(0.5, -big, -big, -big);
    let hi = SVector::<f64, 4>::new(big, big, big, big);
    let z0 = SVector::<f64, 4>::new(eq.v, eq.r, eq.delta, eq.torque);
    match lm::solve_box(
        |z| residual(z, beta_iso, radius, dir, params, true),
        z0,
        lo,
        hi,
        &opts,
    ) {
        Ok(sol) => {
            let norm = residual(&sol.x, beta_iso, radius, dir, params, false)
                .map(|(r, _)| dimensionless_norm(&r, params))
                .unwrap_or(f64::INFINITY);
            if norm < eq.residual_norm {
                let mut out = *eq;
                out.v = sol.x[0];
                out.r = sol.x[1];
                out.delta = sol.x[2];
                out.torque = sol.x[3];
                out.fx_r = out.torque / params.r_e;
                out.residual_norm = norm;
                out
            } else {
                *eq
            }
        }
        Err(_) => *eq,
    }
}

/// Dimensionless residual norm of the body equations at an (interpolated)
/// equilibrium; the path row is zero by construction of `curvature()`.
pub fn residual_norm_at(eq: &Equilibrium, params: &VehicleParams) -> f64 {
    let k_path = eq.r / eq.v;
    match derivative(&eq.state(), &eq.controls(), k_path, params) {
        Ok(d) => ((d.v / params.g).powi(2) + d.beta * d.beta + d.r * d.r).sqrt(),
        Err(_) => f64::INFINITY,
    }
}

fn grid_range(g: &[f64]) -> (f64, f64) {
    let lo = g.iter().cloned().fold(f64::INFINITY, f64::min).abs();
    let hi = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max).abs();
    (lo.min(hi), lo.max(hi))
}

/// Bracketing index and interpolation weight in a monotone grid; `magnitude`
/// compares by absolute value (for signed sideslip labels).
fn bracket(grid: &[f64], q: f64, magnitude: bool) -> (usize, f64) {
    let val = |x: f64| if magnitude { x.abs() } else { x };
    let n = grid.len();
    if n == 1 {
        return (0, 0.0);
    }
    // Work on indices ordered by value.
    let ascending = val(grid[n - 1]) >= val(grid[0]);
    let at = |k: usize| if ascending { val(grid[k]) } else { val(grid[n - 1 - k]) };
    let map_back = |k: usize| if ascending { k } else { n - 2 - k };
    let qv = q;
    let mut k = 0;
    while k + 2 < n && at(k + 1) <= qv {
        k += 1;
    }
    let (lo, hi) = (at(k), at(k + 1));
    let t = if qv <= lo {
        0.0
    } else if qv >= hi {
        1.0
    } else {
        (qv - lo) / (hi - lo)
    };
    if ascending {
        (map_back(k), t)
    } else {
        (map_back(k), 1.0 - t)
    }
}

// ------------------------------------------------------------------------
// Map serialisation: CSV (documented column order) and a versioned binary
// cache. Both are byte-deterministic for identical maps.
// ------------------------------------------------------------------------

pub const MAP_CSV_HEADER: &str = "beta_des_deg,radius_m,accepted,v_mps,beta_rad,r_radps,\
omega_f_radps,omega_r_radps,delta_rad,torque_nm,kappa_r,fy_f_n,fy_r_n,fx_r_n,fz_f_n,fz_r_n,\
residual_norm,regime";

const MAP_MAGIC: &[u8; 4] = b"DEQM";
const MAP_VERSION: u32 = 1;

impl EquilibriumMap {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), EquilibriaError> {
        writeln!(w, "{MAP_CSV_HEADER}")?;
        for (i, &beta) in self.beta_grid.iter().enumerate() {
            for (j, &radius) in self.radius_grid.iter().enumerate() {
                let beta_deg = beta.to_degrees();
                match self.cell(i, j) {
                    Some(e) => writeln!(
                        w,
                        "{beta_deg},{radius},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                        u8::from(e.accepted),
                        e.v,
                        e.beta,
                        e.r,
                        e.omega_f,
                        e.omega_r,
                        e.delta,
                        e.torque,
                        e.kappa_r,
                        e.fy_f,
                        e.fy_r,
                        e.fx_r,
                        e.fz_f,
                        e.fz_r,
                        e.residual_norm,
                        e.regime.as_str()
                    )?,
                    None => writeln!(
                        w,
                        "{beta_deg},{radius},0,nan,nan,nan,nan,nan,nan,nan,nan,nan,nan,nan,nan,nan,nan,failed"
                    )?,
                }
            }
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self, EquilibriaError> {
        let mut beta_grid = Vec::new();
        let mut radius_grid = Vec::new();
        let mut rows = Vec::new();
        for (ln, line) in r.lines().enumerate() {
            let line = line?;
            if ln == 0 {
                if line != MAP_CSV_HEADER {
                    return Err(EquilibriaError::Parse("unexpected CSV header".into()));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 18 {
                return Err(EquilibriaError::Parse(format!("row {ln}: expected 18 fields")));
            }
            let num = |k: usize| -> Result<f64, EquilibriaError> {
                fields[k]
                    .parse::<f64>()
                    .map_err(|e| EquilibriaError::Parse(format!("row {ln} field {k}: {e}")))
            };
            let beta = num(0)?.to_radians();
            let radius = num(1)?;
            if beta_grid.last() != Some(&beta) && !beta_grid.contains(&beta) {
                beta_grid.push(beta);
            }
            if !radius_grid.contains(&radius) {
                radius_grid.push(radius);
            }
            let cell = if fields[17] == "failed" {
                None
            } else {
                Some(Equilibrium {
                    v: num(3)?,
                    beta: num(4)?,
                    r: num(5)?,
                    omega_f: num(6)?,
                    omega_r: num(7)?,
                    delta: num(8)?,
                    torque: num(9)?,
                    kappa_r: num(10)?,
                    fy_f: num(11)?,
                    fy_r: num(12)?,
                    fx_r: num(13)?,
                    fz_f: num(14)?,
                    fz_r: num(15)?,
                    residual_norm: num(16)?,
                    accepted: num(2)? != 0.0,
                    regime: Regime::from_str(fields[17])
                        .ok_or_else(|| EquilibriaError::Parse(format!("row {ln}: bad regime")))?,
                })
            };
            rows.push(cell);
        }
        if rows.len() != beta_grid.len() * radius_grid.len() {
            return Err(EquilibriaError::Parse("grid shape mismatch".into()));
        }
        let mut map = EquilibriumMap { beta_grid, radius_grid, cells: rows, peaks: None };
        map.peaks = map.locate_peaks();
        Ok(map)
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<(), EquilibriaError> {
        w.write_all(MAP_MAGIC)?;
        w.write_all(&MAP_VERSION.to_le_bytes())?;
        let dims = [self.beta_grid.len() as u32, self.radius_grid.len() as u32];
        for d in dims {
            w.write_all(&d.to_le_bytes())?;
        }
        for &b in self.beta_grid.iter().chain(self.radius_grid.iter()) {
            w.write_all(&b.to_le_bytes())?;
        }
        for cell in &self.cells {
            match cell {
                None => w.write_all(&[0u8])?,
                Some(e) => {
                    w.write_all(&[1u8])?;
                    for v in [
                        e.v, e.beta, e.r, e.omega_f, e.omega_r, e.delta, e.torque, e.kappa_r,
                        e.fy_f, e.fy_r, e.fx_r, e.fz_f, e.fz_r, e.residual_norm,
                    ] {
                        w.write_all(&v.to_le_bytes())?;
                    }
                    let tag: u8 = match e.regime {
                        Regime::Linear => 0,
                        Regime::Transient => 1,
                        Regime::FullDrift => 2,
                    };
                    w.write_all(&[tag, u8::from(e.accepted)])?;
                }
            }
        }
        Ok(())
    }

    pub fn read_binary(data: &[u8]) -> Result<Self, EquilibriaError> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], EquilibriaError> {
            if *pos + n > data.len() {
                return Err(EquilibriaError::Parse("truncated binary map".into()));
            }
            let s = &data[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != MAP_MAGIC {
            return Err(EquilibriaError::Parse("bad magic".into()));
        }
        let ver = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if ver != MAP_VERSION {
            return Err(EquilibriaError::Parse(format!("unsupported version {ver}")));
        }
        let nb = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let nr = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let f64_at = |pos: &mut usize| -> Result<f64, EquilibriaError> {
            Ok(f64::from_le_bytes(take(pos, 8)?.try_into().unwrap()))
        };
        let beta_grid: Vec<f64> =
            (0..nb).map(|_| f64_at(&mut pos)).collect::<Result<_, _>>()?;
        let radius_grid: Vec<f64> =
            (0..nr).map(|_| f64_at(&mut pos)).collect::<Result<_, _>>()?;
        let mut cells = Vec::with_capacity(nb * nr);
        for _ in 0..nb * nr {
            let tag = take(&mut pos, 1)?[0];
            if tag == 0 {
                cells.push(None);
                continue;
            }
            let mut vals = [0.0f64; 14];
            for v in &mut vals {
                *v = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
            }
            let meta = take(&mut pos, 2)?;
            let regime = match meta[0] {
                0 => Regime::Linear,
                1 => Regime::Transient,
                2 => Regime::FullDrift,
                t => return Err(EquilibriaError::Parse(format!("bad regime tag {t}"))),
            };
            cells.push(Some(Equilibrium {
                v: vals[0],
                beta: vals[1],
                r: vals[2],
                omega_f: vals[3],
                omega_r: vals[4],
                delta: vals[5],
                torque: vals[6],
                kappa_r: vals[7],
                fy_f: vals[8],
                fy_r: vals[9],
                fx_r: vals[10],
                fz_f: vals[11],
                fz_r: vals[12],
                residual_norm: vals[13],
                accepted: meta[1] != 0,
                regime,
            }));
        }
        let mut map = EquilibriumMap { beta_grid, radius_grid, cells, peaks: None };
        map.peaks = map.locate_peaks();
        Ok(map)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::step_rk4;
    use approx::assert_relative_eq;

    fn params() -> VehicleParams {
        VehicleParams::default()
    }

    fn cfg() -> EquilibriumSolveConfig {
        EquilibriumSolveConfig::default()
    }

    fn small_map() -> EquilibriumMap {
        let beta: Vec<f64> = [2.0, 10.0, 20.0, 30.0].map(f64::to_radians).into();
        let radii = vec![16.0, 20.0, 24.0];
        build_map(&beta, &radii, &params(), &cfg()).unwrap()
    }

    #[test]
    fn shallow_cell_is_linear_with_matching_wheel_speeds() {
        let eq = solve_equilibrium(2.0f64.to_radians(), 60.0, None, &params(), &cfg()).unwrap();
        assert!(eq.accepted, "residual {}", eq.residual_norm);
        assert_eq!(eq.regime, Regime::Linear);
        assert!(eq.delta > 0.0);
        assert!((eq.omega_r - eq.omega_f).abs() <= 0.05 * eq.omega_f);
    }

    #[test]
    fn deep_cell_countersteers() {
        let p = params();
        let c = cfg();
        let mut seed = None;
        let mut eq = None;
        for b in 1..=30 {
            let e = solve_equilibrium((b as f64).to_radians(), 20.0, seed.as_ref(), &p, &c)
                .unwrap();
            if e.accepted {
                seed = Some(e);
            }
            if b == 30 {
                eq = Some(e);
            }
        }
        let eq = eq.unwrap();
        assert!(eq.accepted);
        assert_eq!(eq.regime, Regime::FullDrift);
        // Countersteer: steering sign opposite the yaw rate.
        assert!(eq.delta.signum() != eq.r.signum());
        assert!(eq.omega_r > eq.omega_f);
    }

    #[test]
    fn accepted_point_is_stationary_under_frozen_inputs() {
        let p = params();
        let eq = {
            let mut seed = None;
            let mut out = None;
            for b in 1..=25 {
                let e = solve_equilibrium((b as f64).to_radians(), 20.0, seed.as_ref(), &p, &cfg())
                    .unwrap();
                if e.accepted {
                    seed = Some(e);
                }
                if b == 25 {
                    out = Some(e);
                }
            }
            out.unwrap()
        };
        assert!(eq.accepted);
        let mut x = eq.state();
        let u = eq.controls();
        let k = eq.r / eq.v;
        for _ in 0..50 {
            x = step_rk4(&x, &u, k, 0.02, &p).unwrap();
        }
        assert!((x.v - eq.v).abs() / eq.v.abs() < 1e-5);
        assert!((x.beta - eq.beta).abs() / eq.beta.abs().max(1e-3) < 1e-5);
        assert!((x.r - eq.r).abs() / eq.r.abs() < 1e-5);
    }

    #[test]
    fn degenerate_grid_reproduces_single_solve() {
        let p = params();
        let c = cfg();
        let map = build_map(&[20.0f64.to_radians()], &[20.0], &p, &c).unwrap();
        let direct = solve_equilibrium(20.0f64.to_radians(), 20.0, None, &p, &c).unwrap();
        let cell = map.cell(0, 0).unwrap();
        assert!(cell.accepted && direct.accepted);
        // Same root to solver precision (the map seeds its solve through
        // continuation, so the iteration path differs).
        assert_relative_eq!(cell.v, direct.v, max_relative = 1e-8);
        assert_relative_eq!(cell.delta, direct.delta, max_relative = 1e-6, epsilon = 1e-9);
        assert_relative_eq!(cell.torque, direct.torque, max_relative = 1e-6);
    }

    #[test]
    fn speed_monotone_in_radius_and_omega_gap_grows_with_beta() {
        let map = small_map();
        for i in 0..map.beta_grid.len() {
            let mut last = None;
            for j in 0..map.radius_grid.len() {
                let Some(eq) = map.cell(i, j) else { continue };
                if !eq.accepted {
                    continue;
                }
                if let Some(prev) = last {
                    assert!(eq.v >= prev - 1e-9, "V not monotone at row {i}");
                }
                last = Some(eq.v);
            }
        }
        // Wheel-speed gap increases with sideslip beyond the transient regime.
        let j = 1; // R = 20 m
        let mut last_gap = None;
        for i in 0..map.beta_grid.len() {
            let Some(eq) = map.cell(i, j) else { continue };
            if !eq.accepted || eq.regime != Regime::FullDrift {
                continue;
            }
            let gap = (eq.omega_r - eq.omega_f).abs();
            if let Some(prev) = last_gap {
                assert!(gap > prev, "omega gap not increasing at row {i}");
            }
            last_gap = Some(gap);
        }
        assert!(last_gap.is_some());
    }

    #[test]
    fn mirrored_grid_builds_mirrored_map() {
        let p = params();
        let c = cfg();
        let beta: Vec<f64> = [10.0, 25.0].map(f64::to_radians).into();
        let beta_neg: Vec<f64> = beta.iter().map(|b| -b).collect();
        let radii = vec![20.0, 30.0];
        let left = build_map(&beta, &radii, &p, &c).unwrap();
        let right = build_map(&beta_neg, &radii, &p, &c).unwrap();
        for i in 0..beta.len() {
            for j in 0..radii.len() {
                let l = left.cell(i, j).unwrap();
                let r = right.cell(i, j).unwrap();
                assert!(l.accepted && r.accepted);
                assert_relative_eq!(l.v, r.v, max_relative = 1e-7);
                assert_relative_eq!(l.beta, -r.beta, max_relative = 1e-7);
                assert_relative_eq!(l.r, -r.r, max_relative = 1e-7);
                assert_relative_eq!(l.delta, -r.delta, max_relative = 1e-6, epsilon = 1e-9);
                assert_relative_eq!(l.torque, r.torque, max_relative = 1e-6);
                assert_relative_eq!(l.omega_r, r.omega_r, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn lookup_on_node_is_bitwise_identical() {
        let map = small_map();
        let p = params();
        let node = map.cell(2, 1).unwrap();
        let got = map.lookup(1.0 / 20.0, 20.0f64.to_radians(), &p);
        assert!(!got.saturated);
        assert_eq!(got.eq.v.to_bits(), node.v.to_bits());
        assert_eq!(got.eq.delta.to_bits(), node.delta.to_bits());
        assert_eq!(got.eq.torque.to_bits(), node.torque.to_bits());
    }

    #[test]
    fn lookup_mirrors_for_negative_curvature() {
        let map = small_map();
        let p = params();
        let left = map.lookup(1.0 / 20.0, 20.0f64.to_radians(), &p);
        let right = map.lookup(-1.0 / 20.0, 20.0f64.to_radians(), &p);
        assert_eq!(left.eq.beta, -right.eq.beta);
        assert_eq!(left.eq.r, -right.eq.r);
        assert_eq!(left.eq.delta, -right.eq.delta);
        assert_eq!(left.eq.v, right.eq.v);
        assert_eq!(left.eq.omega_r, right.eq.omega_r);
    }

    #[test]
    fn lookup_midpoint_stays_in_node_envelope_and_reverifies() {
        let map = small_map();
        let p = params();
        // Midpoint between (20 deg, 20 m) and (30 deg, 24 m) neighbours.
        let beta_q = 25.0f64.to_radians();
        let radius_q = 22.0;
        let got = map.lookup(1.0 / radius_q, beta_q, &p);
        assert!(!got.saturated);
        let corners = [
            map.cell(2, 1).unwrap(),
            map.cell(3, 1).unwrap(),
            map.cell(2, 2).unwrap(),
            map.cell(3, 2).unwrap(),
        ];
        for f in [
            |e: &Equilibrium| e.v,
            |e: &Equilibrium| e.delta,
            |e: &Equilibrium| e.torque,
            |e: &Equilibrium| e.r,
        ] {
            let lo = corners.iter().map(|c| f(c)).fold(f64::INFINITY, f64::min);
            let hi = corners.iter().map(|c| f(c)).fold(f64::NEG_INFINITY, f64::max);
            let v = f(&got.eq);
            assert!(v >= lo - 1e-12 && v <= hi + 1e-12, "field outside envelope");
        }
        // Re-verification needs production-like 1-degree label spacing; the
        // coarse map above trades accuracy for test speed.
        let p2 = params();
        let fine_beta: Vec<f64> = [24.0, 25.0, 26.0].map(f64::to_radians).into();
        let fine = build_map(&fine_beta, &[18.0, 20.0, 22.0], &p2, &cfg()).unwrap();
        let mid = fine.lookup(1.0 / 19.0, 24.5f64.to_radians(), &p2);
        assert!(!mid.saturated);
        assert!(mid.eq.residual_norm < 1e-3, "residual {}", mid.eq.residual_norm);
    }

    #[test]
    fn lookup_clamps_outside_hull() {
        let map = small_map();
        let p = params();
        let got = map.lookup(1.0 / 200.0, 20.0f64.to_radians(), &p);
        assert!(got.saturated);
        let got2 = map.lookup(1.0 / 20.0, 60.0f64.to_radians(), &p);
        assert!(got2.saturated);
    }

    #[test]
    fn map_build_rejects_bad_grids() {
        let p = params();
        let c = cfg();
        assert!(matches!(build_map(&[], &[20.0], &p, &c), Err(EquilibriaError::BadGrid)));
        assert!(matches!(
            build_map(&[0.1, 0.1], &[20.0], &p, &c),
            Err(EquilibriaError::BadGrid)
        ));
        assert!(matches!(
            build_map(&[0.1], &[20.0, 18.0], &p, &c),
            Err(EquilibriaError::BadGrid)
        ));
    }

    #[test]
    fn map_build_fails_when_mostly_infeasible() {
        let p = params();
        // A torque box too small to hold any drift makes deep cells fail.
        let c = EquilibriumSolveConfig { torque_max: 1.0, torque_min: -1.0, ..cfg() };
        let beta: Vec<f64> = [20.0, 25.0, 30.0, 35.0].map(f64::to_radians).into();
        let err = build_map(&beta, &[18.0, 22.0], &p, &c);
        assert!(matches!(err, Err(EquilibriaError::MapBuild { .. })));
    }

    #[test]
    fn csv_and_binary_round_trips() {
        let map = small_map();
        let mut csv = Vec::new();
        map.write_csv(&mut csv).unwrap();
        let back = EquilibriumMap::read_csv(csv.as_slice()).unwrap();
        assert_eq!(back.beta_grid.len(), map.beta_grid.len());
        assert_eq!(back.radius_grid, map.radius_grid);
        for (a, b) in map.cells.iter().zip(back.cells.iter()) {
            match (a, b) {
                (Some(x), Some(y)) => {
                    assert_eq!(x.v.to_bits(), y.v.to_bits(), "CSV must round-trip bitwise");
                    assert_eq!(x.regime, y.regime);
                    assert_eq!(x.accepted, y.accepted);
                }
                (None, None) => {}
                _ => panic!("cell presence mismatch"),
            }
        }

        let mut bin = Vec::new();
        map.write_binary(&mut bin).unwrap();
        let back2 = EquilibriumMap::read_binary(&bin).unwrap();
        let mut bin2 = Vec::new();
        back2.write_binary(&mut bin2).unwrap();
        assert_eq!(bin, bin2, "binary cache must be byte-stable");
        assert_eq!(back2.peaks, map.peaks);
    }

    #[test]
    fn rebuild_is_deterministic() {
        let a = small_map();
        let b = small_map();
        let mut wa = Vec::new();
        let mut wb = Vec::new();
        a.write_binary(&mut wa).unwrap();
        b.write_binary(&mut wb).unwrap();
        assert_eq!(wa, wb);
    }
}
