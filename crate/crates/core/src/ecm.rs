//! Expectation-conditional maximization over sliding windows.
//!
//! Each window alternates three steps until the states and used heights stop
//! moving:
//!
//! 1. E-step: gate every return, enumerate association events per cluster of
//!    interacting targets and weight them.
//! 2. CM-step 1: stacked-mode filtering on the equivalent measurements, then
//!    unscented RTS smoothing over the window.
//! 3. CM-step 2: linearized radar and ionosonde evidence on the joint height
//!    field, solved by LGBP for every scan of the window.
//!
//! Windows do not overlap; the terminal smoothed state of one window is the
//! prior of the next.

use log::debug;
use nalgebra::{DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::association::{
    assignment_marginals, enumerate_events, event_prior, gate, ln_gaussian, posterior_weights, target_clusters,
    ClutterModel, Origin, Prediction, DEFAULT_EVENT_CAP,
};
use crate::error::{Error, Result};
use crate::estimation::{
    mode_heights, predict, synthesize_equivalent, update, urts_smooth, Dynamics, EquivalentMeasurement, FilterState,
    UnscentedParams,
};
use crate::geometry::{Layer, MeasurementModel, PropagationMode};
use crate::gmrf::JointField;
use crate::ionosonde::IonosondeMeasurement;
use crate::vih::{assemble_posterior, canonical_update_radar, iono_updates, lgbp_about, used_nodes, CanonicalUpdates, LgbpOptions, UsedVihs};

/// How the tracker treats the heights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VihMode {
    /// Heights pinned at the prior means.
    Fixed,
    /// Heights from ionosonde soundings only.
    IonosondeOnly,
    /// Heights from ionosondes and radar returns together.
    Joint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssociationMode {
    Gated,
    /// Use the simulator's origin labels instead of the E-step.
    Truth,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EcmConfig {
    /// Window length is `kappa + 1` scans.
    pub kappa: usize,
    pub max_iter: usize,
    pub tol_range_km: f64,
    pub tol_bearing_rad: f64,
    pub tol_vih_km: f64,
    pub p_g: f64,
    pub event_cap: usize,
    /// Modes whose association mass is at or below this are dropped.
    pub min_weight: f64,
    pub lgbp: LgbpOptions,
    pub unscented: UnscentedParams,
    pub vih_mode: VihMode,
    pub association: AssociationMode,
}

impl Default for EcmConfig {
    fn default() -> Self {
        Self {
            kappa: 1,
            max_iter: 20,
            tol_range_km: 1e-3,
            tol_bearing_rad: 1e-6,
            tol_vih_km: 1e-2,
            p_g: 0.9973,
            event_cap: DEFAULT_EVENT_CAP,
            min_weight: 1e-12,
            lgbp: LgbpOptions::default(),
            unscented: UnscentedParams::default(),
            vih_mode: VihMode::Joint,
            association: AssociationMode::Gated,
        }
    }
}

impl EcmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kappa == 0 || self.max_iter == 0 {
            return Err(Error::Config("kappa and max_iter must be at least 1".into()));
        }
        if !(self.tol_range_km > 0.0 && self.tol_bearing_rad > 0.0 && self.tol_vih_km > 0.0) {
            return Err(Error::Config("convergence tolerances must be positive".into()));
        }
        if !(self.p_g > 0.0 && self.p_g <= 1.0) {
            return Err(Error::Config(format!("gate probability {} not in (0, 1]", self.p_g)));
        }
        Ok(())
    }
}

/// Everything observed at one scan.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Scan {
    pub index: usize,
    pub radar: Vec<Vector3<f64>>,
    /// Origin of each radar return; needed only for [`AssociationMode::Truth`].
    pub labels: Vec<Origin>,
    pub soundings: Vec<IonosondeMeasurement>,
}

/// Marginal height estimates over the whole joint field.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldEstimate {
    pub mean: DVector<f64>,
    pub var: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanEstimate {
    pub index: usize,
    pub states: Vec<FilterState>,
    /// `None` when the target's reflection points left the grid.
    pub vihs: Vec<Option<UsedVihs>>,
    pub field: FieldEstimate,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct IterationDiagnostics {
    pub events: usize,
    pub largest_cluster_events: usize,
    /// Shannon entropy of the event posteriors, summed over scans and clusters.
    pub weight_entropy: f64,
    pub lgbp_converged: bool,
    pub lgbp_max_iterations: usize,
    pub objective: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowResult {
    pub scans: Vec<ScanEstimate>,
    pub iterations: Vec<IterationDiagnostics>,
    pub converged: bool,
}

impl WindowResult {
    pub fn terminal(&self) -> &[FilterState] {
        &self.scans.last().expect("non-empty window").states
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackResult {
    pub scans: Vec<ScanEstimate>,
    pub windows: Vec<(usize, Vec<IterationDiagnostics>, bool)>,
}

/// Models and configuration shared by every window of a run.
pub struct Tracker<'a> {
    pub model: &'a dyn MeasurementModel,
    pub dynamics: &'a dyn Dynamics,
    /// Measurement noise per mode.
    pub r: [Matrix3<f64>; 4],
    pub p_d: [f64; 4],
    pub clutter: ClutterModel,
    pub field: &'a JointField,
    pub cfg: EcmConfig,
    prior: FieldEstimate,
}

struct EStep {
    marginals: Vec<[Vec<(usize, f64)>; 4]>,
    events: usize,
    largest: usize,
    entropy: f64,
}

impl<'a> Tracker<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: &'a dyn MeasurementModel,
        dynamics: &'a dyn Dynamics,
        r: [Matrix3<f64>; 4],
        p_d: [f64; 4],
        clutter: ClutterModel,
        field: &'a JointField,
        cfg: EcmConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if field.nodes_per_layer != model.nodes_per_layer() {
            return Err(Error::Invalid(format!(
                "field has {} nodes per layer, geometry expects {}",
                field.nodes_per_layer,
                model.nodes_per_layer()
            )));
        }
        let solved = lgbp_about(&field.q, &field.eta, &field.mu, &cfg.lgbp)?;
        let prior = FieldEstimate {
            mean: field.mu.clone(),
            var: solved.var,
            converged: solved.converged,
            iterations: solved.iterations,
        };
        Ok(Self {
            model,
            dynamics,
            r,
            p_d,
            clutter,
            field,
            cfg,
            prior,
        })
    }

    pub fn prior_field(&self) -> &FieldEstimate {
        &self.prior
    }

    fn npl(&self) -> usize {
        self.field.nodes_per_layer
    }

    /// β read from a field estimate; layer means when the cells are unknown.
    fn beta(&self, field: &FieldEstimate, cells: Option<(usize, usize)>) -> [f64; 4] {
        match cells {
            Some(c) => used_nodes(c, self.npl()).map(|n| field.mean[n]),
            None => {
                let e = self.field.mu[Layer::E.offset(self.npl())];
                let f = self.field.mu[Layer::F.offset(self.npl())];
                [e, e, f, f]
            }
        }
    }

    fn cells(&self, state: &FilterState) -> Option<(usize, usize)> {
        self.model.subregions(&state.x).ok()
    }

    fn used(&self, field: &FieldEstimate, cells: Option<(usize, usize)>) -> Option<UsedVihs> {
        cells.map(|c| {
            let nodes = used_nodes(c, self.npl());
            UsedVihs {
                cells: c,
                nodes,
                heights: nodes.map(|n| field.mean[n]),
                variances: nodes.map(|n| field.var[n]),
            }
        })
    }

    fn solve_field(&self, updates: &CanonicalUpdates, reference: &DVector<f64>) -> Result<FieldEstimate> {
        let (q, eta) = assemble_posterior(self.field, updates)?;
        let r = lgbp_about(&q, &eta, reference, &self.cfg.lgbp)?;
        if !r.converged {
            debug!("LGBP stopped after {} iterations without converging", r.iterations);
        }
        Ok(FieldEstimate {
            mean: r.mean,
            var: r.var,
            converged: r.converged,
            iterations: r.iterations,
        })
    }

    fn predictions(&self, state: &FilterState, beta: &[f64; 4]) -> Result<[Option<Prediction>; 4]> {
        let mut out = [None; 4];
        for mode in PropagationMode::ALL {
            let (ht, hr) = mode_heights(beta, mode);
            let y = match self.model.measure(&state.x, ht, hr) {
                Ok(y) => y,
                Err(Error::Domain(_)) => continue,
                Err(e) => return Err(e),
            };
            let j = self.model.state_jacobian(&state.x, ht, hr)?;
            let s = j * state.p * j.transpose() + self.r[mode.index()];
            out[mode.index()] = Some(Prediction {
                y,
                s: (s + s.transpose()) * 0.5,
            });
        }
        Ok(out)
    }

    fn e_step(&self, scan: &Scan, states: &[FilterState], betas: &[[f64; 4]], ids: &[usize]) -> Result<EStep> {
        let n = states.len();
        if self.cfg.association == AssociationMode::Truth {
            let mut marginals: Vec<[Vec<(usize, f64)>; 4]> = (0..n).map(|_| Default::default()).collect();
            for (j, origin) in scan.labels.iter().enumerate() {
                if let Origin::Target { target, mode } = origin {
                    if let Some(l) = ids.iter().position(|id| id == target) {
                        marginals[l][mode.index()].push((j, 1.0));
                    }
                }
            }
            return Ok(EStep {
                marginals,
                events: 1,
                largest: 1,
                entropy: 0.0,
            });
        }

        let preds = states
            .iter()
            .zip(betas)
            .map(|(s, b)| self.predictions(s, b))
            .collect::<Result<Vec<_>>>()?;
        let g = gate(&preds, &scan.radar, self.cfg.p_g)?;
        let mut marginals: Vec<[Vec<(usize, f64)>; 4]> = (0..n).map(|_| Default::default()).collect();
        let (mut events_total, mut largest, mut entropy) = (0, 0, 0.0);
        for cluster in target_clusters(&g) {
            let sub = g.subset(&cluster);
            let mut events = enumerate_events(&sub, self.cfg.event_cap)?;
            event_prior(&mut events, &self.p_d, &sub, &self.clutter);
            let priors: Vec<f64> = events.iter().map(|e| e.prior).collect();
            let mut lls = Vec::with_capacity(events.len());
            for e in &events {
                let mut acc = 0.0;
                for (k, mode, j) in e.pairs() {
                    let l = cluster[k];
                    let p = preds[l][mode.index()].expect("gated modes have predictions");
                    // Each assigned return replaces a clutter return that
                    // would be uniform over this gate.
                    acc += ln_gaussian(&scan.radar[j], &p.y, &p.s)? + sub.targets[k][mode.index()].volume.ln();
                }
                lls.push(acc);
            }
            let w = posterior_weights(&priors, &lls)?;
            for (e, wi) in events.iter_mut().zip(&w) {
                e.posterior = *wi;
                if *wi > 0.0 {
                    entropy -= wi * wi.ln();
                }
            }
            events_total += events.len();
            largest = largest.max(events.len());
            for (k, m) in assignment_marginals(&events, cluster.len()).into_iter().enumerate() {
                marginals[cluster[k]] = m;
            }
        }
        Ok(EStep {
            marginals,
            events: events_total,
            largest,
            entropy,
        })
    }

    /// Run one window. `prior` holds each target's state at the scan before
    /// the window; `ids` maps tracker targets to label ids.
    pub fn run_window(&self, scans: &[Scan], prior: &[FilterState], ids: &[usize]) -> Result<WindowResult> {
        if scans.is_empty() {
            return Err(Error::Invalid("empty window".into()));
        }
        if ids.len() != prior.len() {
            return Err(Error::Invalid(format!("{} label ids for {} targets", ids.len(), prior.len())));
        }
        let n = prior.len();
        let len = scans.len();

        let iono_fields: Option<Vec<FieldEstimate>> = match self.cfg.vih_mode {
            VihMode::IonosondeOnly => Some(
                scans
                    .iter()
                    .map(|s| self.solve_field(&iono_updates(&s.soundings, &self.field.mu, self.npl())?, &self.field.mu))
                    .collect::<Result<_>>()?,
            ),
            _ => None,
        };
        let mut fields: Vec<FieldEstimate> = match &iono_fields {
            Some(f) => f.clone(),
            None => vec![self.prior.clone(); len],
        };

        let mut smoothed: Option<Vec<Vec<FilterState>>> = None; // [target][scan]
        let mut prev_beta: Option<Vec<Vec<[f64; 4]>>> = None;
        let mut diagnostics = Vec::new();
        let mut converged = false;
        let mut equivalents: Vec<Vec<Vec<EquivalentMeasurement>>> = vec![vec![Vec::new(); len]; n];

        for iter in 0..self.cfg.max_iter {
            let mut diag = IterationDiagnostics {
                lgbp_converged: true,
                ..Default::default()
            };

            // E-step interleaved with the forward filter.
            let mut filtered: Vec<Vec<FilterState>> = vec![Vec::with_capacity(len); n];
            let mut last: Vec<FilterState> = prior.to_vec();
            for (k, scan) in scans.iter().enumerate() {
                let preds: Vec<FilterState> = last.iter().map(|s| predict(s, self.dynamics)).collect();
                let scan_betas: Vec<[f64; 4]> = preds
                    .iter()
                    .map(|s| self.beta(&fields[k], self.cells(s)))
                    .collect();
                let e = self.e_step(scan, &preds, &scan_betas, ids)?;
                diag.events += e.events;
                diag.largest_cluster_events = diag.largest_cluster_events.max(e.largest);
                diag.weight_entropy += e.entropy;
                for l in 0..n {
                    let eqs = synthesize_equivalent(&e.marginals[l], &scan.radar, &self.r, self.cfg.min_weight);
                    let post = update(&preds[l], &eqs, &scan_betas[l], self.model)?;
                    equivalents[l][k] = eqs;
                    filtered[l].push(post);
                    last[l] = post;
                }
            }
            let sm: Vec<Vec<FilterState>> = filtered
                .iter()
                .map(|f| urts_smooth(f, self.dynamics, &self.cfg.unscented))
                .collect::<Result<_>>()?;

            // CM-step 2.
            if self.cfg.vih_mode == VihMode::Joint {
                for (k, scan) in scans.iter().enumerate() {
                    let mut upd = iono_updates(&scan.soundings, &self.field.mu, self.npl())?;
                    for l in 0..n {
                        let Some(cells) = self.cells(&sm[l][k]) else { continue };
                        for eq in &equivalents[l][k] {
                            let nodes = used_nodes(cells, self.npl());
                            let (t, r) = eq.mode.used_vih_slots();
                            let h0 = (self.field.mu[nodes[t]], self.field.mu[nodes[r]]);
                            match canonical_update_radar(eq, &sm[l][k].x, h0, cells, self.model) {
                                Ok(u) => upd.extend(u),
                                Err(Error::Domain(msg)) => debug!("skipping radar term: {msg}"),
                                Err(e) => return Err(e),
                            }
                        }
                    }
                    let reference = fields[k].mean.clone();
                    fields[k] = self.solve_field(&upd, &reference)?;
                }
                diag.lgbp_converged = fields.iter().all(|f| f.converged);
                diag.lgbp_max_iterations = fields.iter().map(|f| f.iterations).max().unwrap_or(0);
            }

            let new_beta: Vec<Vec<[f64; 4]>> = (0..n)
                .map(|l| (0..len).map(|k| self.beta(&fields[k], self.cells(&sm[l][k]))).collect())
                .collect();
            diag.objective = self.objective(scans, prior, &sm, &fields, &equivalents)?;

            let done = match (&smoothed, &prev_beta) {
                (Some(old), Some(ob)) => {
                    let mut state_ok = true;
                    for l in 0..n {
                        for k in 0..len {
                            let d = sm[l][k].x - old[l][k].x;
                            if d[0].abs() >= self.cfg.tol_range_km || d[2].abs() >= self.cfg.tol_bearing_rad {
                                state_ok = false;
                            }
                        }
                    }
                    let beta_ok = new_beta
                        .iter()
                        .flatten()
                        .zip(ob.iter().flatten())
                        .all(|(a, b)| a.iter().zip(b).all(|(x, y)| (x - y).abs() < self.cfg.tol_vih_km));
                    state_ok && beta_ok
                }
                _ => false,
            };
            debug!("ECM iteration {} objective {:.6}", iter + 1, diag.objective);
            diagnostics.push(diag);
            smoothed = Some(sm);
            prev_beta = Some(new_beta);
            if done {
                converged = true;
                break;
            }
        }
        if !converged {
            debug!("ECM window stopped at max_iter = {}", self.cfg.max_iter);
        }

        let sm = smoothed.expect("at least one iteration");
        let out = (0..len)
            .map(|k| {
                let states: Vec<FilterState> = (0..n).map(|l| sm[l][k]).collect();
                let vihs = states.iter().map(|s| self.used(&fields[k], self.cells(s))).collect();
                ScanEstimate {
                    index: scans[k].index,
                    states,
                    vihs,
                    field: fields[k].clone(),
                }
            })
            .collect();
        Ok(WindowResult {
            scans: out,
            iterations: diagnostics,
            converged,
        })
    }

    /// Expected complete-data log posterior of the smoothed states and the
    /// field means, up to constants.
    fn objective(
        &self,
        scans: &[Scan],
        prior: &[FilterState],
        sm: &[Vec<FilterState>],
        fields: &[FieldEstimate],
        equivalents: &[Vec<Vec<EquivalentMeasurement>>],
    ) -> Result<f64> {
        let b_inv = self
            .dynamics
            .noise()
            .try_inverse()
            .ok_or_else(|| Error::Singular("process noise".into()))?;
        let mut acc = 0.0;
        for (l, seq) in sm.iter().enumerate() {
            let first = predict(&prior[l], self.dynamics);
            let p_inv = first
                .p
                .try_inverse()
                .ok_or_else(|| Error::Singular("window prior covariance".into()))?;
            let d = seq[0].x - first.x;
            acc -= 0.5 * (d.transpose() * p_inv * d)[0];
            for k in 1..seq.len() {
                let d = seq[k].x - self.dynamics.propagate(&seq[k - 1].x);
                acc -= 0.5 * (d.transpose() * b_inv * d)[0];
            }
            for (k, eqs) in equivalents[l].iter().enumerate() {
                let beta = self.beta(&fields[k], self.cells(&seq[k]));
                for eq in eqs {
                    let (ht, hr) = mode_heights(&beta, eq.mode);
                    let u = self.model.measure(&seq[k].x, ht, hr)?;
                    let nu = eq.y - u;
                    let r_inv = eq.r.try_inverse().ok_or_else(|| Error::Singular("equivalent covariance".into()))?;
                    acc -= 0.5 * (nu.transpose() * r_inv * nu)[0];
                }
            }
        }
        for (k, f) in fields.iter().enumerate() {
            let d = &f.mean - &self.field.mu;
            acc -= 0.5 * d.dot(&self.field.q.mul_vec(&d));
            for s in &scans[k].soundings {
                let h = f.mean[s.site.joint_node(self.npl())];
                acc -= 0.5 * (s.z - s.site.kind.delay(h)).powi(2) / s.site.noise_var;
            }
        }
        Ok(acc)
    }

    /// Track over consecutive scans, window by window.
    pub fn run(&self, scans: &[Scan], init: &[FilterState], ids: &[usize]) -> Result<TrackResult> {
        let mut prior = init.to_vec();
        let mut out = Vec::with_capacity(scans.len());
        let mut windows = Vec::new();
        for chunk in scans.chunks(self.cfg.kappa + 1) {
            let w = self.run_window(chunk, &prior, ids)?;
            if !w.converged {
                debug!("window starting at scan {} did not converge", chunk[0].index);
            }
            prior = w.terminal().to_vec();
            windows.push((chunk[0].index, w.iterations.clone(), w.converged));
            out.extend(w.scans);
        }
        Ok(TrackResult { scans: out, windows })
    }
}
