//! Print the built-in reference scenario as TOML, or load and summarize a
//! scenario file.
//!
//! cargo run --example scenario_config > my_scenario.toml
//! cargo run --example scenario_config -- my_scenario.toml

use std::path::Path;

use othr_ecm::config::ScenarioConfig;
use othr_ecm::gmrf::dense_marginals;
use othr_ecm::sim::Scenario;

fn main() -> othr_ecm::Result<()> {
    let Some(path) = std::env::args().nth(1) else {
        print!("{}", ScenarioConfig::reference().to_toml());
        return Ok(());
    };
    let scenario = Scenario::new(ScenarioConfig::load(Path::new(&path))?)?;
    let g = scenario.geometry.grid;
    println!("grid: {} x {} cells of {} km", g.nx, g.ny, g.cell);
    println!("ionosonde soundings per scan: {}", scenario.sites.len());
    let b = scenario.clutter_box;
    println!(
        "clutter box: r_g {:.1}..{:.1} km, r_r {}..{} km/s, a_z {:.4}..{:.4} rad, lambda {:.3e}",
        b.slant_range[0], b.slant_range[1], b.range_rate[0], b.range_rate[1], b.azimuth[0], b.azimuth[1],
        scenario.clutter.lambda
    );
    let (_, var) = dense_marginals(&scenario.field.q.to_dense(), &scenario.field.eta)?;
    let npl = scenario.nodes_per_layer();
    for (name, layer, nominal) in [
        ("E", &var.as_slice()[..npl], scenario.config.gmrf.e.nominal_std_km),
        ("F", &var.as_slice()[npl..], scenario.config.gmrf.f.nominal_std_km),
    ] {
        let sd: Vec<f64> = layer.iter().map(|v| v.sqrt()).collect();
        let min = sd.iter().copied().fold(f64::INFINITY, f64::min);
        let max = sd.iter().copied().fold(0.0, f64::max);
        let mean = sd.iter().sum::<f64>() / sd.len() as f64;
        println!("{name} layer prior std: {min:.2}..{max:.2} km, mean {mean:.2} km (nominal {nominal} km)");
    }
    Ok(())
}
