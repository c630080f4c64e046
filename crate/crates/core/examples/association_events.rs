//! Gate one simulated scan against the predicted returns of every target and
//! list the association events of each cluster with their posteriors.
//!
//! cargo run --release --example association_events -- [seed] [scan]

use othr_ecm::association::{
    enumerate_events, event_prior, gate, ln_gaussian, posterior_weights, target_clusters, Origin, Prediction,
    DEFAULT_EVENT_CAP,
};
use othr_ecm::config::ScenarioConfig;
use othr_ecm::estimation::{mode_heights, predict};
use othr_ecm::geometry::{MeasurementModel, PropagationMode};
use othr_ecm::sim::Scenario;
use othr_ecm::vih::used_nodes;

fn main() -> othr_ecm::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(3);
    let k: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);

    let scenario = Scenario::new(ScenarioConfig::reference())?;
    let all: Vec<usize> = (0..scenario.config.targets.len()).collect();
    let truth = scenario.simulate(seed, &all)?;
    let scan = &truth.scans[k - 1];
    let npl = scenario.nodes_per_layer();
    println!(
        "scan {k}: {} returns, {} from targets",
        scan.radar.len(),
        scan.labels.iter().filter(|o| **o != Origin::Clutter).count()
    );

    // One-step predictions from a perturbed copy of the previous true state.
    let mut preds = Vec::new();
    for &t in &all {
        let mut prior = scenario.initial_estimate(t);
        prior.x = truth.states[t][k - 1];
        prior.x[0] += 1.0;
        let p = predict(&prior, &scenario.dynamics);
        let cells = scenario.geometry.subregions(&p.x)?;
        let beta = used_nodes(cells, npl).map(|n| scenario.field.mu[n]);
        let per_mode: [Option<Prediction>; 4] = std::array::from_fn(|m| {
            let mode = PropagationMode::ALL[m];
            let (ht, hr) = mode_heights(&beta, mode);
            let y = scenario.geometry.measure(&p.x, ht, hr).ok()?;
            let j = scenario.geometry.state_jacobian(&p.x, ht, hr).ok()?;
            Some(Prediction {
                y,
                s: j * p.p * j.transpose() + scenario.r[m],
            })
        });
        preds.push(per_mode);
    }

    let g = gate(&preds, &scan.radar, scenario.config.ecm.p_g)?;
    let p_d = [scenario.config.radar.detection_probability; 4];
    for cluster in target_clusters(&g) {
        let sub = g.subset(&cluster);
        let mut events = enumerate_events(&sub, DEFAULT_EVENT_CAP)?;
        event_prior(&mut events, &p_d, &sub, &scenario.clutter);
        let lls = events
            .iter()
            .map(|e| {
                e.pairs().try_fold(0.0, |acc, (l, mode, j)| {
                    let p = preds[cluster[l]][mode.index()].expect("gated mode");
                    let ll: othr_ecm::Result<f64> = ln_gaussian(&scan.radar[j], &p.y, &p.s);
                    Ok::<f64, othr_ecm::Error>(acc + ll? + sub.targets[l][mode.index()].volume.ln())
                })
            })
            .collect::<othr_ecm::Result<Vec<f64>>>()?;
        let priors: Vec<f64> = events.iter().map(|e| e.prior).collect();
        let post = posterior_weights(&priors, &lls)?;
        let targets: Vec<usize> = cluster.iter().map(|l| l + 1).collect();
        println!("\ncluster of targets {targets:?}: {} events", events.len());

        let mut order: Vec<usize> = (0..events.len()).collect();
        order.sort_by(|a, b| post[*b].total_cmp(&post[*a]));
        for &i in order.iter().take(3) {
            let pairs: Vec<String> = events[i]
                .pairs()
                .map(|(l, mode, j)| {
                    let hit = scan.labels[j] == Origin::Target { target: cluster[l], mode };
                    format!("t{} {mode:?} <- y{j}{}", cluster[l] + 1, if hit { "" } else { " (wrong)" })
                })
                .collect();
            println!("  posterior {:.4}  prior {:.2e}  {}", post[i], priors[i], pairs.join(", "));
        }
    }
    Ok(())
}
