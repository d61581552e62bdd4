use drift_core::dynamics::*;
use drift_core::equilibria::*;
use std::time::Instant;

fn main() {
    let p = VehicleParams::default();
    let cfg = EquilibriumSolveConfig::default();
    let beta_grid: Vec<f64> = (1..=40).map(|d| (d as f64).to_radians()).collect();
    let radius_grid: Vec<f64> = (0..=26).map(|i| 8.0 + 2.0 * i as f64).collect();
    let t0 = Instant::now();
    let map = match build_map(&beta_grid, &radius_grid, &p, &cfg) { Ok(m) => m, Err(e) => { println!("BUILD FAILED: {e}"); build_map_lenient(&beta_grid, &radius_grid, &p, &cfg) } };
    let dt = t0.elapsed();
    let total = map.cells.len();
    let ok = map.accepted_count();
    println!("built {}x{} in {:.1}s: accepted {}/{} ({:.1}%)",
        beta_grid.len(), radius_grid.len(), dt.as_secs_f64(), ok, total,
        100.0 * ok as f64 / total as f64);
    // Infeasibility pattern: print a compact grid (rows beta, cols R).
    for i in 0..beta_grid.len() {
        let row: String = (0..radius_grid.len()).map(|j| {
            match map.cell(i, j) {
                Some(e) if e.accepted => match e.regime {
                    Regime::Linear => 'L',
                    Regime::Transient => 't',
                    Regime::FullDrift => 'D',
                },
                _ => '.',
            }
        }).collect();
        println!("{:2} {}", i + 1, row);
    }
    println!("peaks: {:?}", map.peaks);
}

fn build_map_lenient(
    beta_grid: &[f64],
    radius_grid: &[f64],
    p: &drift_core::dynamics::VehicleParams,
    cfg: &drift_core::equilibria::EquilibriumSolveConfig,
) -> drift_core::equilibria::EquilibriumMap {
    use drift_core::equilibria::*;
    let mut cells = Vec::new();
    for &b in beta_grid {
        for &r in radius_grid {
            cells.push(None::<Equilibrium>);
            let _ = (b, r);
        }
    }
    // solve column by column like build_map but without the failure gate
    let mut map = EquilibriumMap {
        beta_grid: beta_grid.to_vec(),
        radius_grid: radius_grid.to_vec(),
        cells,
        peaks: None,
    };
    for (j, &radius) in radius_grid.iter().enumerate() {
        let mut seed: Option<Equilibrium> = None;
        for (i, &beta) in beta_grid.iter().enumerate() {
            let solved = solve_equilibrium(beta, radius, seed.as_ref(), p, cfg).ok();
            if let Some(eq) = &solved {
                if eq.accepted { seed = Some(*eq); }
            }
            map.cells[i * radius_grid.len() + j] = solved;
        }
    }
    map
}
