//! Monte Carlo comparison of the tracking cases on one scenario.
//!
//! cargo run --release --example monte_carlo -- [runs] [scenario.toml]

use std::path::Path;

use othr_ecm::config::ScenarioConfig;
use othr_ecm::experiment::{prior_std, run_experiment, ExperimentSpec, MetricsReport};
use othr_ecm::sim::Scenario;

fn row(name: &str, r: &MetricsReport) {
    let m = r.mean();
    let v = r.mean_vih_km();
    println!(
        "{name:<28} {:>9.4} {:>11.3e} {:>8.3} {:>8.3} {:>5}",
        m[0],
        m[1],
        v[0],
        v[1],
        r.excluded.len()
    );
}

fn main() -> othr_ecm::Result<()> {
    let mut args = std::env::args().skip(1);
    let runs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(20);
    let config = match args.next() {
        Some(p) => ScenarioConfig::load(Path::new(&p))?,
        None => ScenarioConfig::reference(),
    };
    let scenario = Scenario::new(config)?;
    let seed = 1;
    let all: Vec<usize> = (0..scenario.config.targets.len()).collect();
    let run = |case: u8, kappa: usize, targets: Option<Vec<usize>>| {
        let mut spec = ExperimentSpec::new(case, runs, kappa, seed);
        spec.targets = targets;
        run_experiment(&scenario, &spec)
    };

    println!("{runs} runs per case; mean RMSE over scans (and targets)\n");
    println!("{:<28} {:>9} {:>11} {:>8} {:>8} {:>5}", "case", "range_km", "bearing_rad", "hE_km", "hF_km", "excl");
    let c1 = run(1, 1, None)?;
    let c2 = run(2, 1, None)?;
    let c3 = run(3, 1, None)?;
    let c3k = run(3, 30, None)?;
    row("1 fixed VIHs", &c1);
    row("2 ionosonde only", &c2);
    row("3 joint", &c3);
    row("3 joint, kappa = 30", &c3k);
    let iono = run(2, 1, Some(all.clone()))?;
    let c4 = run(4, 1, None)?;
    let c5 = run(5, 1, None)?;
    let c6 = run(6, 1, None)?;
    row("all targets, ionosonde only", &iono);
    row("4 fixed VIHs", &c4);
    row("5 isolated trackers", &c5);
    row("6 joint multitarget", &c6);

    let p1 = prior_std(&scenario, &[0], seed)?;
    let pall = prior_std(&scenario, &all, seed)?;
    println!("\nprior std at used nodes: target 1 E {:.3} F {:.3} km, all targets E {:.3} F {:.3} km", p1[0], p1[1], pall[0], pall[1]);
    println!("range improvement over case 1: case 2 {:.1}%, case 3 {:.1}%", 100.0 * c2.improvement_over(&c1)[0], 100.0 * c3.improvement_over(&c1)[0]);
    for (name, r) in [("ionosonde only", &iono), ("case 5", &c5), ("case 6", &c6)] {
        let imp = r.vih_improvement_over_prior(pall);
        println!("used-VIH improvement over prior std, {name}: E {:.1}%, F {:.1}%", 100.0 * imp[0], 100.0 * imp[1]);
    }
    Ok(())
}
