//! Infer the two-layer height field of one scan from ionosonde soundings
//! alone and then with labelled radar returns added, solving each posterior
//! by loopy belief propagation and by a dense Cholesky solve.
//!
//! cargo run --release --example height_field -- [seed] [scan]

use nalgebra::DVector;

use othr_ecm::association::Origin;
use othr_ecm::config::ScenarioConfig;
use othr_ecm::estimation::EquivalentMeasurement;
use othr_ecm::gmrf::dense_marginals;
use othr_ecm::sim::Scenario;
use othr_ecm::vih::{assemble_posterior, canonical_update_radar, iono_updates, lgbp_about, used_nodes, CanonicalUpdates};

fn rms_at(mean: &DVector<f64>, truth: &DVector<f64>, nodes: &[usize]) -> f64 {
    (nodes.iter().map(|&n| (mean[n] - truth[n]).powi(2)).sum::<f64>() / nodes.len() as f64).sqrt()
}

fn main() -> othr_ecm::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(5);
    let k: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(10);

    let scenario = Scenario::new(ScenarioConfig::reference())?;
    let all: Vec<usize> = (0..scenario.config.targets.len()).collect();
    let truth = scenario.simulate(seed, &all)?;
    let scan = &truth.scans[k - 1];
    let field = &truth.fields[k - 1];
    let npl = scenario.nodes_per_layer();
    let lgbp_opts = scenario.config.ecm.lgbp;

    let mut used: Vec<usize> = all
        .iter()
        .filter_map(|&l| truth.cells[l][k - 1].map(|c| used_nodes(c, npl)))
        .flatten()
        .collect();
    used.sort_unstable();
    used.dedup();

    let mut radar = CanonicalUpdates::default();
    for (y, origin) in scan.radar.iter().zip(&scan.labels) {
        let Origin::Target { target, mode } = *origin else { continue };
        let Some(cells) = truth.cells[target][k - 1] else { continue };
        let eq = EquivalentMeasurement {
            mode,
            y: *y,
            r: scenario.r[mode.index()],
            weight: 1.0,
        };
        let nodes = used_nodes(cells, npl);
        let (t, r) = mode.used_vih_slots();
        let h0 = (scenario.field.mu[nodes[t]], scenario.field.mu[nodes[r]]);
        radar.extend(canonical_update_radar(&eq, &truth.states[target][k], h0, cells, &scenario.geometry)?);
    }

    let iono = iono_updates(&scan.soundings, &scenario.field.mu, npl)?;
    let mut joint = iono.clone();
    joint.extend(radar);

    println!("scan {k}, {} used nodes, {} soundings", used.len(), scan.soundings.len());
    println!("{:<22} {:>10} {:>12} {:>11} {:>10}", "evidence", "rms_km", "mean_sd_km", "lgbp_iters", "vs_dense");
    let (_, prior_var) = dense_marginals(&scenario.field.q.to_dense(), &scenario.field.eta)?;
    let prior_sd = used.iter().map(|&n| prior_var[n].sqrt()).sum::<f64>() / used.len() as f64;
    println!(
        "{:<22} {:>10.3} {:>12.3} {:>11} {:>10}",
        "prior",
        rms_at(&scenario.field.mu, field, &used),
        prior_sd,
        "-",
        "-"
    );
    for (name, updates) in [("ionosondes", &iono), ("ionosondes + radar", &joint)] {
        let (q, eta) = assemble_posterior(&scenario.field, updates)?;
        let bp = lgbp_about(&q, &eta, &scenario.field.mu, &lgbp_opts)?;
        let (mean, var) = dense_marginals(&q.to_dense(), &eta)?;
        let sd = used.iter().map(|&n| var[n].sqrt()).sum::<f64>() / used.len() as f64;
        println!(
            "{name:<22} {:>10.3} {:>12.3} {:>11} {:>10.1e}",
            rms_at(&bp.mean, field, &used),
            sd,
            bp.iterations,
            (&bp.mean - &mean).amax()
        );
    }
    Ok(())
}
