use drift_core::dynamics::*;
use drift_core::equilibria::*;

fn main() {
    let p = VehicleParams::default();
    let cfg = EquilibriumSolveConfig::default();
    let beta_grid: Vec<f64> = (1..=40).map(|d| (d as f64).to_radians()).collect();
    let radius_grid: Vec<f64> = (0..=24).map(|i| 12.0 + 2.0 * i as f64).collect();
    let map = build_map(&beta_grid, &radius_grid, &p, &cfg).unwrap();
    println!("accepted {}/{}", map.accepted_count(), map.cells.len());

    // Acceptance criterion 2 scan.
    let mut viol_counter = 0;
    let mut viol_mono = 0;
    let mut viol_omega = 0;
    for i in 0..map.beta_grid.len() {
        let mut last_v: Option<f64> = None;
        for j in 0..map.radius_grid.len() {
            let Some(eq) = map.cell(i, j) else { continue };
            if !eq.accepted { continue; }
            if let Some(lv) = last_v {
                if eq.v < lv - 1e-9 { viol_mono += 1;
                    if viol_mono < 5 { println!("V mono viol at ({},{}) {} < {}", i+1, map.radius_grid[j], eq.v, lv); } }
            }
            last_v = Some(eq.v);
            if eq.regime == Regime::FullDrift {
                if eq.delta.signum() == eq.r.signum() {
                    viol_counter += 1;
                    if viol_counter < 8 { println!("countersteer viol at b={} R={}: delta={:.2}d r={:.2} kap={:.3}", i+1, map.radius_grid[j], eq.delta.to_degrees(), eq.r, eq.kappa_r); }
                }
                if eq.omega_r <= eq.omega_f { viol_omega += 1; }
            }
        }
    }
    println!("violations: countersteer={viol_counter} v_monotone={viol_mono} omega={viol_omega}");

    // Criterion 3: open-loop instability of full drift cells.
    let mut n_drift = 0;
    let mut n_unstable = 0;
    for i in 0..map.beta_grid.len() {
        for j in 0..map.radius_grid.len() {
            let Some(eq) = map.cell(i, j) else { continue };
            if !eq.accepted || eq.regime != Regime::FullDrift { continue; }
            n_drift += 1;
            let (a, _) = linearize(&eq.state(), &eq.controls(), eq.r / eq.v, &p).unwrap();
            let sub = a.fixed_view::<3, 3>(0, 0).into_owned();
            if sub.complex_eigenvalues().iter().any(|c| c.re > 0.0) { n_unstable += 1; }
        }
    }
    println!("full_drift cells {n_drift}, unstable {n_unstable} ({:.1}%)", 100.0 * n_unstable as f64 / n_drift as f64);

    // Regime pattern.
    for i in 0..map.beta_grid.len() {
        let row: String = (0..map.radius_grid.len()).map(|j| match map.cell(i, j) {
            Some(e) if e.accepted => match e.regime {
                Regime::Linear => 'L', Regime::Transient => 't', Regime::FullDrift => 'D' },
            _ => '.',
        }).collect();
        println!("{:2} {}", i + 1, row);
    }
}
