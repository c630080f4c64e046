//! Check the solvers against dense and brute-force references: LGBP against
//! a Cholesky solve, event enumeration against the filtered cross product,
//! analytic Jacobians against central differences and the unscented smoother
//! against the closed-form RTS smoother.
//!
//! cargo run --release --example oracle_checks -- [seed]

use othr_ecm::config::ScenarioConfig;
use othr_ecm::oracle;
use othr_ecm::sim::Scenario;

fn main() -> othr_ecm::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let scenario = Scenario::new(ScenarioConfig::reference())?;
    for check in oracle::run_all(&scenario, seed)? {
        let verdict = if check.pass { "ok  " } else { "FAIL" };
        println!("{verdict} {:<26} {}", check.name, check.detail);
    }
    Ok(())
}
