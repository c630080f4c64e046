//! Monte Carlo experiments over the six tracking cases and their metrics.

use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ecm::{AssociationMode, EcmConfig, TrackResult, Tracker, VihMode};
use crate::error::{Error, Result};
use crate::sim::{GroundTruth, Scenario};
use crate::gmrf::dense_marginals;
use crate::vih::used_nodes;

/// Metric columns per target, in export order.
pub const METRICS: [&str; 6] = [
    "rmse_range_km",
    "rmse_bearing_rad",
    "rmse_hE_it_km",
    "rmse_hE_ir_km",
    "rmse_hF_it_km",
    "rmse_hF_ir_km",
];

/// What a case id switches on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaseDef {
    pub id: u8,
    pub vih_mode: VihMode,
    pub targets: Vec<usize>,
    /// One tracker per target instead of one joint tracker.
    pub isolated: bool,
    pub label: &'static str,
}

impl CaseDef {
    pub fn new(id: u8, n_targets: usize) -> Result<Self> {
        let all: Vec<usize> = (0..n_targets).collect();
        let (vih_mode, targets, isolated, label) = match id {
            1 => (VihMode::Fixed, vec![0], false, "single target, fixed VIHs"),
            2 => (VihMode::IonosondeOnly, vec![0], false, "single target, ionosonde-only VIHs"),
            3 => (VihMode::Joint, vec![0], false, "single target, joint VIH inference"),
            4 => (VihMode::Fixed, all, false, "multitarget fixed-VIH baseline"),
            5 => (VihMode::Joint, all, true, "per-target isolated trackers, joint VIH inference"),
            6 => (VihMode::Joint, all, false, "multitarget joint tracking and VIH inference"),
            _ => return Err(Error::Config(format!("case must be 1..=6, got {id}"))),
        };
        Ok(Self {
            id,
            vih_mode,
            targets,
            isolated,
            label,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub case: u8,
    pub runs: usize,
    pub kappa: usize,
    pub seed: u64,
    /// Replaces the case's target selection.
    pub targets: Option<Vec<usize>>,
    pub association: AssociationMode,
    /// Worker threads; `None` uses every core.
    pub workers: Option<usize>,
}

impl ExperimentSpec {
    pub fn new(case: u8, runs: usize, kappa: usize, seed: u64) -> Self {
        Self {
            case,
            runs,
            kappa,
            seed,
            targets: None,
            association: AssociationMode::Gated,
            workers: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        if self.kappa == 0 {
            return Err(Error::Config("kappa must be at least 1".into()));
        }
        if !(1..=6).contains(&self.case) {
            return Err(Error::Config(format!("case must be 1..=6, got {}", self.case)));
        }
        Ok(())
    }
}

/// Signed errors of one run: `[target][scan][metric]`, `None` where the
/// quantity is undefined (a reflection point outside the grid).
pub type RunErrors = Vec<Vec<[Option<f64>; 6]>>;

/// Root mean square over runs.
pub fn compute_rmse(errors: &[f64]) -> f64 {
    if errors.is_empty() {
        return f64::NAN;
    }
    (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScanRow {
    pub scan: usize,
    pub run_count: usize,
    /// `[target][metric]`.
    pub rmse: Vec<[f64; 6]>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub case: u8,
    pub label: String,
    pub kappa: usize,
    pub runs: usize,
    pub seed: u64,
    pub targets: Vec<usize>,
    /// Runs that aborted, with the reason.
    pub excluded: Vec<(u64, String)>,
    pub rows: Vec<ScanRow>,
    /// RMS exact prior marginal std at the true used nodes, E then F layer.
    pub prior_std_km: [f64; 2],
}

impl MetricsReport {
    pub fn completed(&self) -> usize {
        self.runs - self.excluded.len()
    }

    /// Mean over scans of the per-scan RMSE, per target and metric.
    pub fn mean_per_target(&self) -> Vec<[f64; 6]> {
        (0..self.targets.len())
            .map(|l| {
                let mut out = [0.0; 6];
                for (m, o) in out.iter_mut().enumerate() {
                    let vals: Vec<f64> = self.rows.iter().map(|r| r.rmse[l][m]).filter(|v| v.is_finite()).collect();
                    *o = if vals.is_empty() {
                        f64::NAN
                    } else {
                        vals.iter().sum::<f64>() / vals.len() as f64
                    };
                }
                out
            })
            .collect()
    }

    /// Per-target means averaged over targets.
    pub fn mean(&self) -> [f64; 6] {
        let per = self.mean_per_target();
        let mut out = [0.0; 6];
        for (m, o) in out.iter_mut().enumerate() {
            *o = per.iter().map(|t| t[m]).sum::<f64>() / per.len() as f64;
        }
        out
    }

    pub fn mean_range_km(&self) -> f64 {
        self.mean()[0]
    }

    /// Mean used-VIH RMSE per layer, E then F.
    pub fn mean_vih_km(&self) -> [f64; 2] {
        let m = self.mean();
        [(m[2] + m[3]) / 2.0, (m[4] + m[5]) / 2.0]
    }

    /// `(ref - self) / ref` per metric.
    pub fn improvement_over(&self, reference: &MetricsReport) -> [f64; 6] {
        let (a, b) = (self.mean(), reference.mean());
        std::array::from_fn(|m| (b[m] - a[m]) / b[m])
    }

    /// Used-VIH improvement per layer relative to the prior std.
    pub fn vih_improvement_over_prior(&self, prior_std_km: [f64; 2]) -> [f64; 2] {
        let v = self.mean_vih_km();
        [0, 1].map(|i| (prior_std_km[i] - v[i]) / prior_std_km[i])
    }

    pub fn csv_header(&self) -> Vec<String> {
        let mut h = vec!["scan".to_string(), "run_count".to_string()];
        for t in &self.targets {
            h.extend(METRICS.iter().map(|m| format!("t{}_{m}", t + 1)));
        }
        h
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(self.csv_header())?;
        for row in &self.rows {
            let mut rec = vec![row.scan.to_string(), row.run_count.to_string()];
            rec.extend(row.rmse.iter().flatten().map(|v| format!("{v:e}")));
            out.write_record(rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("ascii")
    }

    /// Rows back from an exported CSV.
    pub fn rows_from_csv<R: std::io::Read>(r: R, n_targets: usize) -> csv::Result<Vec<ScanRow>> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let num = |i: usize| rec.get(i).unwrap_or("").parse::<f64>().unwrap_or(f64::NAN);
            rows.push(ScanRow {
                scan: rec.get(0).unwrap_or("0").parse().unwrap_or(0),
                run_count: rec.get(1).unwrap_or("0").parse().unwrap_or(0),
                rmse: (0..n_targets).map(|l| std::array::from_fn(|m| num(2 + 6 * l + m))).collect(),
            });
        }
        Ok(rows)
    }

    /// Structured-text summary; `reference` adds improvement ratios.
    pub fn summary(&self, reference: Option<&MetricsReport>, config_toml: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "case = {}", self.case);
        let _ = writeln!(s, "label = {:?}", self.label);
        if matches!(self.case, 1 | 4) {
            let _ = writeln!(s, "baseline = \"fixed-VIH\"");
        }
        if self.case == 4 {
            let _ = writeln!(s, "note = \"the MD-JPDAF comparison is represented by the fixed-VIH baseline only\"");
        }
        let _ = writeln!(s, "kappa = {}", self.kappa);
        let _ = writeln!(s, "runs = {}", self.runs);
        let _ = writeln!(s, "completed_runs = {}", self.completed());
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "targets = {:?}", self.targets.iter().map(|t| t + 1).collect::<Vec<_>>());
        let _ = writeln!(s, "excluded_runs = {}", self.excluded.len());
        for (seed, why) in &self.excluded {
            let _ = writeln!(s, "# excluded seed {seed}: {why}");
        }
        let _ = writeln!(s, "prior_std_km = [{:.6}, {:.6}]", self.prior_std_km[0], self.prior_std_km[1]);
        let _ = writeln!(s, "\n[mean]");
        for (name, v) in METRICS.iter().zip(self.mean()) {
            let _ = writeln!(s, "{name} = {v:.6e}");
        }
        let vih = self.vih_improvement_over_prior(self.prior_std_km);
        let _ = writeln!(s, "vih_improvement_over_prior = [{:.6}, {:.6}]", vih[0], vih[1]);
        for (l, t) in self.mean_per_target().iter().enumerate() {
            let _ = writeln!(s, "\n[mean.target{}]", self.targets[l] + 1);
            for (name, v) in METRICS.iter().zip(t) {
                let _ = writeln!(s, "{name} = {v:.6e}");
            }
        }
        if let Some(r) = reference {
            let _ = writeln!(s, "\n[improvement]\nreference_case = {}", r.case);
            for (name, v) in METRICS.iter().zip(self.improvement_over(r)) {
                let _ = writeln!(s, "{name} = {v:.6}");
            }
        }
        let _ = writeln!(s, "\n[config]");
        for line in config_toml.lines() {
            let _ = writeln!(s, "# {line}");
        }
        s
    }

    /// Write `case{N}_kappa{K}.csv` and/or `.summary.toml` under `dir`.
    pub fn export(
        &self,
        dir: &Path,
        reference: Option<&MetricsReport>,
        config_toml: &str,
        csv: bool,
        summary: bool,
    ) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let stem = format!("case{}_kappa{}", self.case, self.kappa);
        if csv {
            let path = dir.join(format!("{stem}.csv"));
            let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            self.write_csv(file).map_err(|e| Error::Csv { path, source: e })?;
        }
        if summary {
            let path = dir.join(format!("{stem}.summary.toml"));
            std::fs::write(&path, self.summary(reference, config_toml)).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Errors of tracked estimates against the ground truth. `slots[i]` is the
/// tracker-side slot of `truth.targets[i]` in `result`.
pub fn run_errors(scenario: &Scenario, truth: &GroundTruth, results: &[(&TrackResult, usize)]) -> RunErrors {
    let npl = scenario.nodes_per_layer();
    results
        .iter()
        .enumerate()
        .map(|(i, (res, slot))| {
            res.scans
                .iter()
                .map(|est| {
                    let k = est.index;
                    let x = est.states[*slot].x;
                    let xt = truth.states[i][k];
                    let mut e = [None; 6];
                    e[0] = Some(x[0] - xt[0]);
                    e[1] = Some(x[2] - xt[2]);
                    if let (Some(v), Some(h)) = (&est.vihs[*slot], truth.used_heights(i, k, npl)) {
                        for j in 0..4 {
                            e[2 + j] = Some(v.heights[j] - h[j]);
                        }
                    }
                    e
                })
                .collect()
        })
        .collect()
}

/// One simulate-and-track cycle.
pub fn run_once(scenario: &Scenario, tracker: &Tracker<'_>, case: &CaseDef, seed: u64) -> Result<RunErrors> {
    let truth = scenario.simulate(seed, &case.targets)?;
    let init: Vec<_> = case.targets.iter().map(|&t| scenario.initial_estimate(t)).collect();
    if case.isolated {
        let results = case
            .targets
            .iter()
            .zip(&init)
            .map(|(&t, x0)| tracker.run(&truth.scans, std::slice::from_ref(x0), &[t]))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<(&TrackResult, usize)> = results.iter().map(|r| (r, 0)).collect();
        Ok(run_errors(scenario, &truth, &refs))
    } else {
        let res = tracker.run(&truth.scans, &init, &case.targets)?;
        let refs: Vec<(&TrackResult, usize)> = (0..case.targets.len()).map(|i| (&res, i)).collect();
        Ok(run_errors(scenario, &truth, &refs))
    }
}

/// RMS prior std over the true used nodes of every target and scan, from
/// the exact marginal variances (LGBP variances are overconfident on loops).
pub fn prior_std(scenario: &Scenario, targets: &[usize], seed: u64) -> Result<[f64; 2]> {
    let truth = scenario.simulate(seed, targets)?;
    let (_, var) = dense_marginals(&scenario.field.q.to_dense(), &scenario.field.eta)?;
    let npl = scenario.nodes_per_layer();
    let (mut acc, mut n) = ([0.0; 2], 0usize);
    for cells in &truth.cells {
        for c in cells.iter().flatten() {
            let nodes = used_nodes(*c, npl);
            acc[0] += var[nodes[0]] + var[nodes[1]];
            acc[1] += var[nodes[2]] + var[nodes[3]];
            n += 2;
        }
    }
    Ok(acc.map(|a| (a / n as f64).sqrt()))
}

/// Run the Monte Carlo experiment; run `i` uses seed `spec.seed + i`.
pub fn run_experiment(scenario: &Scenario, spec: &ExperimentSpec) -> Result<MetricsReport> {
    spec.validate()?;
    let mut case = CaseDef::new(spec.case, scenario.config.targets.len())?;
    if let Some(t) = &spec.targets {
        if t.is_empty() {
            return Err(Error::Config("target selection is empty".into()));
        }
        case.targets = t.clone();
    }
    let cfg = EcmConfig {
        kappa: spec.kappa,
        vih_mode: case.vih_mode,
        association: spec.association,
        ..scenario.config.ecm
    };
    let tracker = scenario.tracker(cfg)?;

    let seeds: Vec<u64> = (0..spec.runs as u64).map(|i| spec.seed.wrapping_add(i)).collect();
    let work = || -> Vec<Result<RunErrors>> {
        seeds
            .par_iter()
            .map(|&s| run_once(scenario, &tracker, &case, s))
            .collect()
    };
    let outcomes = match spec.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?
            .install(work),
        None => work(),
    };

    let mut excluded = Vec::new();
    let mut done: Vec<RunErrors> = Vec::new();
    for (seed, out) in seeds.iter().zip(outcomes) {
        match out {
            Ok(e) => done.push(e),
            Err(e @ (Error::EventOverflow { .. } | Error::NotPositiveDefinite(_) | Error::Singular(_) | Error::Domain(_))) => {
                warn!("run with seed {seed} excluded: {e}");
                excluded.push((*seed, e.to_string()));
            }
            Err(e) => return Err(e),
        }
    }

    let n_targets = case.targets.len();
    let rows = (1..=scenario.config.scans)
        .map(|k| ScanRow {
            scan: k,
            run_count: done.len(),
            rmse: (0..n_targets)
                .map(|l| {
                    std::array::from_fn(|m| {
                        let errs: Vec<f64> = done.iter().filter_map(|r| r[l][k - 1][m]).collect();
                        compute_rmse(&errs)
                    })
                })
                .collect(),
        })
        .collect();

    Ok(MetricsReport {
        case: case.id,
        label: case.label.to_string(),
        kappa: spec.kappa,
        runs: spec.runs,
        seed: spec.seed,
        targets: case.targets.clone(),
        excluded,
        rows,
        prior_std_km: prior_std(scenario, &case.targets, spec.seed)?,
    })
}

/// Default reference case for improvement ratios.
pub fn reference_case(case: u8) -> Option<u8> {
    match case {
        2 | 3 => Some(1),
        5 | 6 => Some(4),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ScenarioConfig;

    #[test]
    fn rmse_examples() {
        assert_eq!(compute_rmse(&[0.0, 0.0, 0.0]), 0.0);
        assert_eq!(compute_rmse(&[-2.5]), 2.5);
        assert!((compute_rmse(&[3.0, 4.0]) - 12.5_f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn case_table() {
        assert_eq!(CaseDef::new(1, 5).unwrap().targets, vec![0]);
        assert_eq!(CaseDef::new(6, 5).unwrap().targets.len(), 5);
        assert!(CaseDef::new(5, 5).unwrap().isolated);
        assert_eq!(CaseDef::new(4, 5).unwrap().vih_mode, VihMode::Fixed);
        assert!(CaseDef::new(7, 5).is_err());
        assert!(ExperimentSpec::new(1, 0, 1, 0).validate().is_err());
    }

    fn tiny(case: u8) -> (Scenario, ExperimentSpec) {
        let mut cfg = ScenarioConfig::reference();
        cfg.scans = 4;
        let mut spec = ExperimentSpec::new(case, 2, 1, 11);
        spec.association = AssociationMode::Truth;
        (Scenario::new(cfg).unwrap(), spec)
    }

    #[test]
    fn csv_schema_and_round_trip() {
        let (sc, mut spec) = tiny(4);
        spec.targets = Some(vec![0, 3]);
        let report = run_experiment(&sc, &spec).unwrap();
        let text = report.to_csv_string();
        let header = text.lines().next().unwrap();
        assert_eq!(header.split(',').count(), 2 + 6 * 2);
        assert!(header.starts_with("scan,run_count,t1_rmse_range_km"));
        assert!(header.contains("t4_rmse_hF_ir_km"));
        let rows = MetricsReport::rows_from_csv(text.as_bytes(), 2).unwrap();
        assert_eq!(rows, report.rows);
        assert!(report.rows.iter().flat_map(|r| r.rmse.iter().flatten()).all(|v| *v >= 0.0));
    }

    #[test]
    fn empty_report_is_header_only() {
        let (sc, spec) = tiny(1);
        let mut report = run_experiment(&sc, &spec).unwrap();
        report.rows.clear();
        let text = report.to_csv_string();
        assert_eq!(text.lines().count(), 1);
    }

    #[test]
    fn fixed_case_vih_error_is_prior_mean_error() {
        let (sc, spec) = tiny(1);
        let tracker = sc.tracker(EcmConfig {
            vih_mode: VihMode::Fixed,
            association: AssociationMode::Truth,
            ..EcmConfig::default()
        })
        .unwrap();
        let case = CaseDef::new(1, 5).unwrap();
        let errs = run_once(&sc, &tracker, &case, spec.seed).unwrap();
        let truth = sc.simulate(spec.seed, &[0]).unwrap();
        // Pinned heights are the prior means whatever cell the tracker picks.
        let prior = [110.0, 110.0, 220.0, 220.0];
        for (k, e) in errs[0].iter().enumerate() {
            let Some(h) = truth.used_heights(0, k + 1, 144) else { continue };
            for slot in 0..4 {
                assert!((e[2 + slot].unwrap() + h[slot] - prior[slot]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn experiment_is_reproducible() {
        let (sc, spec) = tiny(3);
        let a = run_experiment(&sc, &spec).unwrap().to_csv_string();
        let b = run_experiment(&sc, &spec).unwrap().to_csv_string();
        assert_eq!(a, b);
    }
}
