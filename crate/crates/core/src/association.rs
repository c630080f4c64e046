//! Gating and multitarget multipath association events.
//!
//! An event assigns each (target, mode) pair at most one gated measurement,
//! and no measurement to more than one pair. The prior of an event is a
//! product of per-(target, mode) detection and gate-local Poisson clutter
//! terms; the posterior reweights it by measurement likelihoods.

use nalgebra::{Matrix3, Vector3};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::geometry::PropagationMode;

pub const DEFAULT_EVENT_CAP: usize = 100_000;

/// Where a radar return came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Origin {
    Clutter,
    Target { target: usize, mode: PropagationMode },
}

/// Mahalanobis threshold of a 3-D gate with probability `p_g`.
pub fn gate_threshold(p_g: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_g) || p_g == 0.0 {
        return Err(Error::Invalid(format!("gate probability {p_g} not in (0, 1]")));
    }
    if p_g == 1.0 {
        return Ok(f64::INFINITY);
    }
    Ok(ChiSquared::new(3.0).expect("3 dof").inverse_cdf(p_g))
}

/// Predicted measurement and innovation covariance for one (target, mode).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub y: Vector3<f64>,
    pub s: Matrix3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModeGate {
    /// Indices of gated measurements, ascending.
    pub members: Vec<usize>,
    pub threshold: f64,
    /// Ellipsoid volume in measurement units (km · km/s · rad).
    pub volume: f64,
}

impl ModeGate {
    fn closed(threshold: f64) -> Self {
        Self {
            members: Vec::new(),
            threshold,
            volume: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateResult {
    pub p_g: f64,
    /// `targets[l][mode index]`.
    pub targets: Vec<[ModeGate; 4]>,
}

impl GateResult {
    pub fn n_targets(&self) -> usize {
        self.targets.len()
    }

    pub fn members(&self, target: usize, mode: PropagationMode) -> &[usize] {
        &self.targets[target][mode.index()].members
    }
}

/// Elliptical gating of every measurement against every (target, mode)
/// prediction. `None` predictions (mode unavailable) get an empty gate.
pub fn gate(
    predictions: &[[Option<Prediction>; 4]],
    measurements: &[Vector3<f64>],
    p_g: f64,
) -> Result<GateResult> {
    let threshold = gate_threshold(p_g)?;
    let mut targets = Vec::with_capacity(predictions.len());
    for per_mode in predictions {
        let mut gates: [ModeGate; 4] = std::array::from_fn(|_| ModeGate::closed(threshold));
        for (g, pred) in gates.iter_mut().zip(per_mode) {
            let Some(pred) = pred else { continue };
            let chol = pred
                .s
                .cholesky()
                .ok_or_else(|| Error::NotPositiveDefinite("innovation covariance".into()))?;
            for (j, y) in measurements.iter().enumerate() {
                let nu = y - pred.y;
                let d2 = nu.dot(&chol.solve(&nu));
                if d2 <= threshold {
                    g.members.push(j);
                }
            }
            let det = pred.s.determinant();
            g.volume = 4.0 / 3.0 * std::f64::consts::PI * threshold.powf(1.5) * det.sqrt();
        }
        targets.push(gates);
    }
    Ok(GateResult { p_g, targets })
}

/// Number of modes of `target` with at least one gated measurement.
pub fn phi_max(gate: &GateResult, target: usize) -> usize {
    gate.targets[target]
        .iter()
        .filter(|g| !g.members.is_empty())
        .count()
}

/// Joint assignment: `assign[l][mode index]` is the measurement given to
/// that (target, mode), if any.
#[derive(Clone, Debug, PartialEq)]
pub struct AssociationEvent {
    pub assign: Vec<[Option<usize>; 4]>,
    pub prior: f64,
    pub posterior: f64,
}

impl AssociationEvent {
    /// Measurements assigned to `target` (the φ of its instance).
    pub fn count(&self, target: usize) -> usize {
        self.assign[target].iter().flatten().count()
    }

    /// `(target, mode, measurement)` triples.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, PropagationMode, usize)> + '_ {
        self.assign.iter().enumerate().flat_map(|(l, modes)| {
            modes.iter().enumerate().filter_map(move |(g, m)| {
                m.map(|j| (l, PropagationMode::from_index(g).expect("mode index"), j))
            })
        })
    }
}

/// All feasible events, in depth-first order over (target, mode) pairs with
/// "unassigned" tried first. Fails once more than `cap` events exist.
pub fn enumerate_events(gate: &GateResult, cap: usize) -> Result<Vec<AssociationEvent>> {
    let n = gate.n_targets();
    let mut out = Vec::new();
    let mut current = vec![[None; 4]; n];
    let mut used = Vec::new();
    descend(gate, 0, &mut current, &mut used, &mut out, cap)?;
    Ok(out)
}

fn descend(
    gate: &GateResult,
    slot: usize,
    current: &mut Vec<[Option<usize>; 4]>,
    used: &mut Vec<usize>,
    out: &mut Vec<AssociationEvent>,
    cap: usize,
) -> Result<()> {
    if slot == gate.n_targets() * 4 {
        if out.len() == cap {
            return Err(Error::EventOverflow { cap });
        }
        out.push(AssociationEvent {
            assign: current.clone(),
            prior: 0.0,
            posterior: 0.0,
        });
        return Ok(());
    }
    let (l, g) = (slot / 4, slot % 4);
    descend(gate, slot + 1, current, used, out, cap)?;
    for &j in &gate.targets[l][g].members {
        if used.contains(&j) {
            continue;
        }
        used.push(j);
        current[l][g] = Some(j);
        descend(gate, slot + 1, current, used, out, cap)?;
        current[l][g] = None;
        used.pop();
    }
    Ok(())
}

/// Poisson clutter with `lambda` returns per unit measurement volume.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClutterModel {
    pub lambda: f64,
    /// Total measurement-space volume; gate volumes are capped at this.
    pub volume: f64,
}

impl ClutterModel {
    pub fn new(lambda: f64, volume: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !(volume > 0.0) {
            return Err(Error::Invalid(format!(
                "clutter needs lambda >= 0 and volume > 0, got {lambda}, {volume}"
            )));
        }
        Ok(Self { lambda, volume })
    }

    /// Expected clutter count inside a gate.
    pub fn gate_mean(&self, gate_volume: f64) -> f64 {
        self.lambda * gate_volume.min(self.volume)
    }
}

fn ln_poisson(k: usize, mean: f64) -> f64 {
    if mean == 0.0 {
        return if k == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    let ln_fact: f64 = (2..=k).map(|i| (i as f64).ln()).sum();
    k as f64 * mean.ln() - mean - ln_fact
}

/// Unnormalized log prior of one event.
pub fn ln_event_prior(event: &AssociationEvent, p_d: &[f64; 4], gate: &GateResult, clutter: &ClutterModel) -> f64 {
    let mut acc = 0.0;
    for (l, modes) in event.assign.iter().enumerate() {
        for (g, m) in modes.iter().enumerate() {
            let mg = &gate.targets[l][g];
            let mean = clutter.gate_mean(mg.volume);
            let pdg = p_d[g] * gate.p_g;
            let n = mg.members.len();
            acc += match m {
                Some(_) => pdg.ln() + ln_poisson(n - 1, mean),
                None => (1.0 - pdg).ln() + ln_poisson(n, mean),
            };
        }
    }
    acc
}

/// Normalize log weights with max subtraction. If every entry is `-inf`
/// the result is uniform.
pub fn normalize_log(logs: &[f64]) -> Vec<f64> {
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![1.0 / logs.len() as f64; logs.len()];
    }
    let w: Vec<f64> = logs.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = w.iter().sum();
    w.into_iter().map(|x| x / sum).collect()
}

/// Fill `prior` on every event, normalized over the list.
pub fn event_prior(events: &mut [AssociationEvent], p_d: &[f64; 4], gate: &GateResult, clutter: &ClutterModel) {
    let logs: Vec<f64> = events.iter().map(|e| ln_event_prior(e, p_d, gate, clutter)).collect();
    for (e, p) in events.iter_mut().zip(normalize_log(&logs)) {
        e.prior = p;
    }
}

/// Log of a 3-D Gaussian density `N(y; mean, cov)`.
pub fn ln_gaussian(y: &Vector3<f64>, mean: &Vector3<f64>, cov: &Matrix3<f64>) -> Result<f64> {
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("measurement covariance".into()))?;
    let nu = y - mean;
    let d2 = nu.dot(&chol.solve(&nu));
    let ln_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    Ok(-0.5 * (3.0 * (2.0 * std::f64::consts::PI).ln() + ln_det + d2))
}

/// Log likelihood of an event: sum of per-assignment log densities supplied
/// by `ln_density(target, mode, measurement)`. The empty event scores 0.
pub fn ln_event_likelihood<F>(event: &AssociationEvent, mut ln_density: F) -> Result<f64>
where
    F: FnMut(usize, PropagationMode, usize) -> Result<f64>,
{
    let mut acc = 0.0;
    for (l, g, j) in event.pairs() {
        acc += ln_density(l, g, j)?;
    }
    Ok(acc)
}

/// Posterior weights from priors and log likelihoods. Zero-prior events
/// keep zero weight; if every product underflows the priors are returned.
pub fn posterior_weights(priors: &[f64], ln_likelihoods: &[f64]) -> Result<Vec<f64>> {
    if priors.is_empty() || priors.len() != ln_likelihoods.len() {
        return Err(Error::Invalid(format!(
            "{} priors for {} likelihoods",
            priors.len(),
            ln_likelihoods.len()
        )));
    }
    let logs: Vec<f64> = priors
        .iter()
        .zip(ln_likelihoods)
        .map(|(p, l)| if *p > 0.0 { p.ln() + l } else { f64::NEG_INFINITY })
        .collect();
    if logs.iter().all(|x| *x == f64::NEG_INFINITY) {
        return Ok(priors.to_vec());
    }
    Ok(normalize_log(&logs))
}

/// Connected groups of targets that share at least one gated measurement.
/// Events factor over these groups, so each can be enumerated separately.
pub fn target_clusters(gate: &GateResult) -> Vec<Vec<usize>> {
    let n = gate.n_targets();
    let mut parent: Vec<usize> = (0..n).collect();
    fn root(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    let mut owner: std::collections::BTreeMap<usize, usize> = Default::default();
    for l in 0..n {
        for g in &gate.targets[l] {
            for &j in &g.members {
                match owner.get(&j) {
                    Some(&k) => {
                        let (a, b) = (root(&mut parent, k), root(&mut parent, l));
                        parent[a.max(b)] = a.min(b);
                    }
                    None => {
                        owner.insert(j, l);
                    }
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for l in 0..n {
        let r = root(&mut parent, l);
        groups.entry(r).or_default().push(l);
    }
    groups.into_values().collect()
}

impl GateResult {
    /// Restriction to a subset of targets, in the given order.
    pub fn subset(&self, targets: &[usize]) -> GateResult {
        GateResult {
            p_g: self.p_g,
            targets: targets.iter().map(|&l| self.targets[l].clone()).collect(),
        }
    }
}

/// Marginal assignment probability of each measurement to each (target,
/// mode): `out[l][mode] = [(measurement, Σ ω over events assigning it)]`.
pub fn assignment_marginals(events: &[AssociationEvent], n_targets: usize) -> Vec<[Vec<(usize, f64)>; 4]> {
    let mut out: Vec<[Vec<(usize, f64)>; 4]> = (0..n_targets).map(|_| Default::default()).collect();
    for e in events {
        if e.posterior == 0.0 {
            continue;
        }
        for (l, g, j) in e.pairs() {
            let slot = &mut out[l][g.index()];
            match slot.iter_mut().find(|(k, _)| *k == j) {
                Some(entry) => entry.1 += e.posterior,
                None => slot.push((j, e.posterior)),
            }
        }
    }
    for modes in &mut out {
        for m in modes.iter_mut() {
            m.sort_by_key(|(j, _)| *j);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn gate_with(members: Vec<Vec<[Vec<usize>; 4]>>, volume: f64) -> GateResult {
        GateResult {
            p_g: 1.0 - 1e-12,
            targets: members
                .into_iter()
                .flatten()
                .map(|m| m.map(|members| ModeGate { members, threshold: 14.16, volume }))
                .collect(),
        }
    }

    fn single(target_modes: [Vec<usize>; 4]) -> Vec<[Vec<usize>; 4]> {
        vec![target_modes]
    }

    #[test]
    fn chi_square_threshold() {
        // Independent bisection on the closed-form 3-dof CDF.
        let cdf = |x: f64| {
            statrs::function::erf::erf((x / 2.0).sqrt())
                - (2.0 * x / std::f64::consts::PI).sqrt() * (-x / 2.0).exp()
        };
        let (mut lo, mut hi) = (0.0, 100.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if cdf(mid) < 0.9973 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let v = gate_threshold(0.9973).unwrap();
        assert_relative_eq!(v, lo, max_relative = 1e-9);
        assert!((v - 14.16).abs() < 0.01, "{v}");
        assert_eq!(gate_threshold(1.0).unwrap(), f64::INFINITY);
        assert!(gate_threshold(0.0).is_err());
    }

    #[test]
    fn gating_basics() {
        let pred = Prediction {
            y: Vector3::new(1000.0, 0.1, 0.1),
            s: Matrix3::from_diagonal(&Vector3::new(25.0, 1e-6, 9e-6)),
        };
        let ys = vec![
            Vector3::new(1000.0, 0.1, 0.1),
            Vector3::new(1030.0, 0.1, 0.1),
            Vector3::new(1010.0, 0.1, 0.1),
        ];
        let g = gate(&[[Some(pred), None, None, None]], &ys, 0.9973).unwrap();
        assert_eq!(g.members(0, PropagationMode::EE), &[0, 2]);
        assert!(g.members(0, PropagationMode::EF).is_empty());
        assert_eq!(phi_max(&g, 0), 1);
        let all = gate(&[[Some(pred), None, None, None]], &ys, 1.0).unwrap();
        assert_eq!(all.members(0, PropagationMode::EE), &[0, 1, 2]);

        let bad = Prediction { s: -Matrix3::identity(), ..pred };
        assert!(gate(&[[Some(bad), None, None, None]], &ys, 0.9).is_err());
    }

    #[test]
    fn phi_max_counts_nonempty_modes() {
        let g = gate_with(vec![single([vec![], vec![], vec![], vec![]])], 1.0);
        assert_eq!(phi_max(&g, 0), 0);
        let g = gate_with(vec![single([vec![1], vec![], vec![], vec![0, 2]])], 1.0);
        assert_eq!(phi_max(&g, 0), 2);
    }

    #[test]
    fn hand_enumerations() {
        let g = gate_with(vec![single([vec![0], vec![], vec![], vec![]])], 1.0);
        assert_eq!(enumerate_events(&g, 10).unwrap().len(), 2);

        let two = gate_with(
            vec![
                single([vec![0], vec![], vec![], vec![]]),
                single([vec![], vec![0], vec![], vec![]]),
            ],
            1.0,
        );
        let ev = enumerate_events(&two, 10).unwrap();
        assert_eq!(ev.len(), 3);
        assert!(ev.iter().all(|e| e.pairs().count() <= 1));

        let none = gate_with(vec![single(Default::default()), single(Default::default())], 1.0);
        assert_eq!(enumerate_events(&none, 10).unwrap().len(), 1);
    }

    #[test]
    fn event_cap_is_a_hard_error() {
        let g = gate_with(vec![single([vec![0, 1, 2], vec![0, 1, 2], vec![0, 1, 2], vec![0, 1, 2]])], 1.0);
        let n = enumerate_events(&g, DEFAULT_EVENT_CAP).unwrap().len();
        assert!(matches!(enumerate_events(&g, n - 1), Err(Error::EventOverflow { .. })));
    }

    #[test]
    fn prior_ratio_single_measurement() {
        let vol = 0.02;
        let clutter = ClutterModel::new(50.0 / 20.0, 20.0).unwrap();
        let mut g = gate_with(vec![single([vec![0], vec![], vec![], vec![]])], vol);
        g.p_g = 0.9973;
        let mut ev = enumerate_events(&g, 10).unwrap();
        let pd = [0.7; 4];
        event_prior(&mut ev, &pd, &g, &clutter);
        let mean = clutter.lambda * vol;
        // Pois(0) = e^-m, Pois(1) = m e^-m.
        let expected = (0.7 * 0.9973 * (-mean).exp()) / ((1.0 - 0.7 * 0.9973) * mean * (-mean).exp());
        assert_relative_eq!(ev[1].prior / ev[0].prior, expected, max_relative = 1e-12);
        assert_relative_eq!(ev[0].prior + ev[1].prior, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn prior_of_sole_event_is_one() {
        let g = gate_with(vec![single(Default::default())], 1.0);
        let mut ev = enumerate_events(&g, 10).unwrap();
        event_prior(&mut ev, &[0.7; 4], &g, &ClutterModel::new(1.0, 10.0).unwrap());
        assert_eq!(ev[0].prior, 1.0);
    }

    #[test]
    fn peak_density() {
        let r = Matrix3::from_diagonal(&Vector3::new(25.0, 1e-6, 9e-6));
        let y = Vector3::new(1.0, 2.0, 3.0);
        let ln = ln_gaussian(&y, &y, &r).unwrap();
        let expected = (2.0 * std::f64::consts::PI).powf(-1.5) / r.determinant().sqrt();
        assert_relative_eq!(ln.exp(), expected, max_relative = 1e-12);
    }

    #[test]
    fn posterior_hand_case() {
        // Two events, priors 0.3 / 0.7, scalar Gaussian likelihoods with
        // unit variance at distances 0 and 1.
        let l0 = -0.5 * (2.0 * std::f64::consts::PI).ln();
        let l1 = l0 - 0.5;
        let w = posterior_weights(&[0.3, 0.7], &[l0, l1]).unwrap();
        let a = 0.3;
        let b = 0.7 * (-0.5f64).exp();
        assert_relative_eq!(w[0], a / (a + b), max_relative = 1e-14);
        assert_relative_eq!(w[1], b / (a + b), max_relative = 1e-14);

        assert_eq!(posterior_weights(&[1.0], &[-3.0]).unwrap(), vec![1.0]);
        let eq = posterior_weights(&[0.2, 0.8], &[-5.0, -5.0]).unwrap();
        assert_relative_eq!(eq[0], 0.2, max_relative = 1e-14);
        let under = posterior_weights(&[0.2, 0.8], &[f64::NEG_INFINITY; 2]).unwrap();
        assert_eq!(under, vec![0.2, 0.8]);
    }

    #[test]
    fn clusters_split_on_disjoint_gates() {
        let g = gate_with(
            vec![
                single([vec![0], vec![], vec![], vec![]]),
                single([vec![3], vec![], vec![], vec![]]),
                single([vec![], vec![], vec![1, 3], vec![]]),
            ],
            1.0,
        );
        assert_eq!(target_clusters(&g), vec![vec![0], vec![1, 2]]);
    }

    #[test]
    fn marginals_sum_weights() {
        let g = gate_with(vec![single([vec![0, 1], vec![], vec![], vec![]])], 1.0);
        let mut ev = enumerate_events(&g, 10).unwrap();
        for (e, w) in ev.iter_mut().zip([0.2, 0.5, 0.3]) {
            e.posterior = w;
        }
        let m = assignment_marginals(&ev, 1);
        assert_eq!(m[0][0], vec![(0, 0.5), (1, 0.3)]);
    }
}
