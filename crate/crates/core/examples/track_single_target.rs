//! Track Target 1 through one simulated run with joint height inference and
//! print what every ECM window did.
//!
//! cargo run --release --example track_single_target -- [seed] [kappa] [scenario.toml]

use othr_ecm::config::ScenarioConfig;
use othr_ecm::ecm::{EcmConfig, VihMode};
use othr_ecm::sim::Scenario;

fn main() -> othr_ecm::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(7);
    let kappa: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);

    let config = match args.next() {
        Some(p) => ScenarioConfig::load(std::path::Path::new(&p))?,
        None => ScenarioConfig::reference(),
    };
    let scenario = Scenario::new(config)?;
    let truth = scenario.simulate(seed, &[0])?;
    let tracker = scenario.tracker(EcmConfig {
        kappa,
        vih_mode: VihMode::Joint,
        ..EcmConfig::default()
    })?;
    let result = tracker.run(&truth.scans, &[scenario.initial_estimate(0)], &[0])?;

    println!("window  iters  converged  events  lgbp_iters  lgbp_ok  objective");
    for (start, diags, converged) in &result.windows {
        let last = diags.last().expect("one iteration");
        println!(
            "{start:>6}  {:>5}  {converged:>9}  {:>6}  {:>10}  {:>7}  {:>12.3}",
            diags.len(),
            last.events,
            last.lgbp_max_iterations,
            last.lgbp_converged,
            last.objective
        );
    }

    println!("\nscan  range_err_km  bearing_err_mrad  hF_it_err_km  hF_it_sd_km");
    let npl = scenario.nodes_per_layer();
    for est in &result.scans {
        let k = est.index;
        let x = est.states[0].x;
        let xt = truth.states[0][k];
        let (herr, hsd) = match (&est.vihs[0], truth.used_heights(0, k, npl)) {
            (Some(v), Some(h)) => (v.heights[2] - h[2], v.variances[2].sqrt()),
            _ => (f64::NAN, f64::NAN),
        };
        println!(
            "{k:>4}  {:>12.3}  {:>16.4}  {:>12.2}  {:>11.2}",
            x[0] - xt[0],
            1e3 * (x[2] - xt[2]),
            herr,
            hsd
        );
    }
    Ok(())
}
