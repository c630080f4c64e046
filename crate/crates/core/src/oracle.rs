//! Reference implementations and self-checks.
//!
//! Each check pits a production routine against a slow but obviously correct
//! counterpart: dense linear algebra, brute-force enumeration, finite
//! differences or the closed-form linear smoother.

use std::collections::BTreeSet;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x4, Matrix4, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::association::{
    enumerate_events, event_prior, gate, posterior_weights, ClutterModel, GateResult, Prediction, DEFAULT_EVENT_CAP,
};
use crate::error::Result;
use crate::estimation::{
    predict, update, urts_smooth, ConstantVelocity, Dynamics, EquivalentMeasurement, FilterState, LinearMeasurement,
    UnscentedParams,
};
use crate::geometry::{MeasurementModel, PropagationMode};
use crate::gmrf::{build_precision, dense_marginals, SparsePrecision};
use crate::sim::Scenario;
use crate::vih::{lgbp, LgbpOptions};

/// Outcome of one self-check.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
    pub seconds: f64,
}

/// Every feasible event by filtering the full cross product of per-slot
/// choices, each as its assignment table.
pub fn brute_force_events(gate: &GateResult) -> BTreeSet<Vec<[Option<usize>; 4]>> {
    let n = gate.n_targets();
    let choices: Vec<Vec<Option<usize>>> = (0..n * 4)
        .map(|s| {
            std::iter::once(None)
                .chain(gate.targets[s / 4][s % 4].members.iter().map(|&j| Some(j)))
                .collect()
        })
        .collect();
    // Odometer over the cross product; a bitmask rejects repeated returns.
    let mut digit = vec![0usize; choices.len()];
    let mut out = BTreeSet::new();
    loop {
        let mut seen = 0u128;
        let mut feasible = true;
        for (s, c) in choices.iter().enumerate() {
            if let Some(j) = c[digit[s]] {
                let bit = 1u128 << (j % 128);
                feasible &= j < 128 && seen & bit == 0;
                seen |= bit;
            }
        }
        if feasible {
            let mut assign = vec![[None; 4]; n];
            for (s, c) in choices.iter().enumerate() {
                assign[s / 4][s % 4] = c[digit[s]];
            }
            out.insert(assign);
        }
        let mut s = 0;
        loop {
            if s == choices.len() {
                return out;
            }
            digit[s] += 1;
            if digit[s] < choices[s].len() {
                break;
            }
            digit[s] = 0;
            s += 1;
        }
    }
}

/// Central differences of the measurement function in the state and in
/// both heights.
pub fn central_differences(
    model: &dyn MeasurementModel,
    x: &Vector4<f64>,
    h_t: f64,
    h_r: f64,
) -> Result<(Matrix3x4<f64>, Vector3<f64>, Vector3<f64>)> {
    let steps = [1e-3, 1e-6, 1e-7, 1e-9];
    let mut j = Matrix3x4::zeros();
    for (i, h) in steps.iter().enumerate() {
        let mut up = *x;
        let mut dn = *x;
        up[i] += h;
        dn[i] -= h;
        let d = (model.measure(&up, h_t, h_r)? - model.measure(&dn, h_t, h_r)?) / (2.0 * h);
        j.set_column(i, &d);
    }
    let hh = 1e-4;
    let dt = (model.measure(x, h_t + hh, h_r)? - model.measure(x, h_t - hh, h_r)?) / (2.0 * hh);
    let dr = (model.measure(x, h_t, h_r + hh)? - model.measure(x, h_t, h_r - hh)?) / (2.0 * hh);
    Ok((j, dt, dr))
}

/// Closed-form RTS smoother for linear dynamics `x' = F x + w`, `w ~ N(0, B)`.
pub fn linear_rts(filtered: &[FilterState], f: &Matrix4<f64>, b: &Matrix4<f64>) -> Option<Vec<FilterState>> {
    let mut out = filtered.to_vec();
    for k in (0..filtered.len().saturating_sub(1)).rev() {
        let fk = &filtered[k];
        let pp = f * fk.p * f.transpose() + b;
        let g = fk.p * f.transpose() * pp.try_inverse()?;
        out[k] = FilterState {
            x: fk.x + g * (out[k + 1].x - f * fk.x),
            p: fk.p + g * (out[k + 1].p - pp) * g.transpose(),
        };
    }
    Some(out)
}

fn max_rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / y.abs().max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

/// Random ionosonde-like node terms and radar-like pair terms on `q`.
fn add_random_evidence(q: &mut SparsePrecision, eta: &mut DVector<f64>, rng: &mut ChaCha8Rng, pairs: bool) {
    let n = q.n();
    for _ in 0..6 {
        let i = rng.random_range(0..n);
        let w = rng.random_range(0.005..0.05);
        q.add_diag(i, w);
        eta[i] += w * rng.random_range(95.0..125.0);
    }
    if !pairs {
        return;
    }
    for _ in 0..8 {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        // Rank-one term c c^T / r of a measurement depending on both nodes.
        let (ci, cj) = (rng.random_range(0.2..1.0), rng.random_range(0.2..1.0));
        let r = rng.random_range(10.0..40.0);
        let z = rng.random_range(200.0..260.0);
        if i == j {
            q.add_diag(i, (ci + cj) * (ci + cj) / r);
            eta[i] += (ci + cj) * z / r;
        } else {
            q.add_diag(i, ci * ci / r);
            q.add_diag(j, cj * cj / r);
            q.add_edge(i, j, ci * cj / r);
            eta[i] += ci * z / r;
            eta[j] += cj * z / r;
        }
    }
}

/// LGBP against dense marginals: means on the loopy lattice, means and
/// variances on a spanning tree of it.
pub fn check_lgbp(seed: u64, trials: usize) -> Result<Check> {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = build_precision(18, 8, 0.082, -0.0205, 110.0)?;
    let opts = LgbpOptions {
        max_iter: 20_000,
        tol: 1e-13,
        damping: 0.0,
    };
    let (mut worst_loopy, mut worst_tree_m, mut worst_tree_v) = (0.0_f64, 0.0_f64, 0.0_f64);
    let mut all_converged = true;
    for _ in 0..trials {
        let mut q = layer.q.clone();
        let mut eta = layer.eta.clone();
        add_random_evidence(&mut q, &mut eta, &mut rng, true);
        let r = lgbp(&q, &eta, &opts)?;
        all_converged &= r.converged;
        let (m, _) = dense_marginals(&q.to_dense(), &eta)?;
        worst_loopy = worst_loopy.max(max_rel(&r.mean, &m));

        // Comb spanning tree: every column edge plus the first row.
        let mut t = SparsePrecision::from_diagonal(layer.q.diagonal().to_vec());
        for (i, j, v) in layer.q.edges() {
            let (a, b) = (i.min(j), i.max(j));
            if b - a == 18 || b < 18 {
                t.add_edge(a, b, v);
            }
        }
        let mut teta = layer.eta.clone();
        add_random_evidence(&mut t, &mut teta, &mut rng, false);
        let r = lgbp(&t, &teta, &opts)?;
        all_converged &= r.converged;
        let (m, v) = dense_marginals(&t.to_dense(), &teta)?;
        worst_tree_m = worst_tree_m.max(max_rel(&r.mean, &m));
        worst_tree_v = worst_tree_v.max(max_rel(&r.var, &v));
    }
    let seconds = t0.elapsed().as_secs_f64();
    Ok(Check {
        name: "lgbp-vs-dense",
        pass: all_converged && worst_loopy <= 1e-6 && worst_tree_m <= 1e-12 && worst_tree_v <= 1e-12 && seconds < 5.0,
        detail: format!(
            "lattice mean rel {worst_loopy:.2e} (tol 1e-6), tree mean rel {worst_tree_m:.2e}, tree var rel {worst_tree_v:.2e} (tol 1e-12), {seconds:.2} s"
        ),
        seconds,
    })
}

/// Random gate of at most 3 targets and 6 measurements in a small box.
pub fn micro_gate(rng: &mut ChaCha8Rng) -> Result<GateResult> {
    let n_t = rng.random_range(1..=3);
    let n_m = rng.random_range(0..=6);
    let s = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 1.0));
    let preds: Vec<[Option<Prediction>; 4]> = (0..n_t)
        .map(|_| {
            std::array::from_fn(|_| {
                rng.random_bool(0.9).then(|| Prediction {
                    y: Vector3::from_fn(|_, _| rng.random_range(-3.0..3.0)),
                    s,
                })
            })
        })
        .collect();
    let ys: Vec<Vector3<f64>> = (0..n_m)
        .map(|_| Vector3::from_fn(|_, _| rng.random_range(-4.0..4.0)))
        .collect();
    gate(&preds, &ys, 0.9973)
}

/// Enumeration against the brute-force cross product, plus normalization
/// of the prior and posterior weights.
pub fn check_association(seed: u64, scenarios: usize) -> Result<Check> {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clutter = ClutterModel::new(0.05, 1e3)?;
    let (mut mismatches, mut worst_sum, mut total_events) = (0usize, 0.0_f64, 0usize);
    for _ in 0..scenarios {
        let g = micro_gate(&mut rng)?;
        let mut events = enumerate_events(&g, DEFAULT_EVENT_CAP)?;
        let fast: BTreeSet<_> = events.iter().map(|e| e.assign.clone()).collect();
        if fast.len() != events.len() || fast != brute_force_events(&g) {
            mismatches += 1;
        }
        total_events += events.len();
        event_prior(&mut events, &[0.7; 4], &g, &clutter);
        let priors: Vec<f64> = events.iter().map(|e| e.prior).collect();
        let lls: Vec<f64> = events.iter().map(|_| rng.random_range(-30.0..5.0)).collect();
        let post = posterior_weights(&priors, &lls)?;
        worst_sum = worst_sum
            .max((priors.iter().sum::<f64>() - 1.0).abs())
            .max((post.iter().sum::<f64>() - 1.0).abs());
    }
    let seconds = t0.elapsed().as_secs_f64();
    Ok(Check {
        name: "events-vs-brute-force",
        pass: mismatches == 0 && worst_sum <= 1e-12 && seconds < 10.0,
        detail: format!(
            "{scenarios} scenarios, {total_events} events, {mismatches} mismatches, max |sum - 1| {worst_sum:.1e}, {seconds:.2} s"
        ),
        seconds,
    })
}

/// Random state in the surveillance region with plausible heights.
pub fn random_state(rng: &mut ChaCha8Rng) -> (Vector4<f64>, f64, f64) {
    let x = Vector4::new(
        rng.random_range(1000.0..1400.0),
        rng.random_range(-0.4..0.4),
        rng.random_range(4.0_f64..12.0).to_radians(),
        rng.random_range(-2e-4..2e-4),
    );
    let ht = if rng.random_bool(0.5) { rng.random_range(90.0..130.0) } else { rng.random_range(190.0..250.0) };
    let hr = if rng.random_bool(0.5) { rng.random_range(90.0..130.0) } else { rng.random_range(190.0..250.0) };
    (x, ht, hr)
}

/// Analytic Jacobians against central differences, per entry relative to
/// the largest entry of the same row.
pub fn check_jacobians(model: &dyn MeasurementModel, seed: u64, states: usize) -> Result<Check> {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..states {
        let (x, ht, hr) = random_state(&mut rng);
        let j = model.state_jacobian(&x, ht, hr)?;
        let (dt, dr) = model.height_jacobian(&x, ht, hr)?;
        let (nj, ndt, ndr) = central_differences(model, &x, ht, hr)?;
        let mut a = DMatrix::zeros(3, 6);
        let mut b = DMatrix::zeros(3, 6);
        a.view_mut((0, 0), (3, 4)).copy_from(&j);
        b.view_mut((0, 0), (3, 4)).copy_from(&nj);
        a.set_column(4, &dt);
        a.set_column(5, &dr);
        b.set_column(4, &ndt);
        b.set_column(5, &ndr);
        for r in 0..3 {
            let scale = b.row(r).amax();
            for c in 0..6 {
                let err = (a[(r, c)] - b[(r, c)]).abs();
                let rel = if b[(r, c)].abs() > 1e-6 * scale { err / b[(r, c)].abs() } else { err / scale };
                worst = worst.max(rel);
            }
        }
    }
    let seconds = t0.elapsed().as_secs_f64();
    Ok(Check {
        name: "jacobians-vs-differences",
        pass: worst <= 1e-4 && seconds < 5.0,
        detail: format!("{states} states, worst relative error {worst:.2e} (tol 1e-4), {seconds:.2} s"),
        seconds,
    })
}

/// Unscented RTS on a linear-Gaussian stub against the closed-form smoother.
pub fn check_smoother(seed: u64, steps: usize) -> Result<Check> {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dynamics = ConstantVelocity {
        dt: 20.0,
        noise_std: [0.1, 2e-3, 2e-4, 4e-6],
    };
    let model = LinearMeasurement {
        h: Matrix3x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0),
        dt: Vector3::new(1.0, 0.0, 0.0),
        dr: Vector3::new(1.0, 0.0, 0.0),
        offset: Vector3::zeros(),
        cells: (0, 0),
        nodes_per_layer: 1,
    };
    let r = Matrix3::from_diagonal(&Vector3::new(25.0, 1e-6, 9e-6));
    let mut s = FilterState::new(
        Vector4::new(1100.0, 0.15, 0.0947, 1.5e-4),
        Matrix4::from_diagonal(&Vector4::new(1.0, 2.5e-5, 1e-6, 1e-10)),
    );
    let mut truth = s.x;
    let mut filtered = Vec::with_capacity(steps);
    for _ in 0..steps {
        truth = dynamics.propagate(&truth);
        s = predict(&s, &dynamics);
        let y = model.h * truth
            + Vector3::new(220.0, 0.0, 0.0)
            + Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-1e-3..1e-3), rng.random_range(-3e-3..3e-3));
        let eq = EquivalentMeasurement {
            mode: PropagationMode::ALL[rng.random_range(0..4)],
            y,
            r,
            weight: 1.0,
        };
        s = update(&s, &[eq], &[110.0, 110.0, 110.0, 110.0], &model)?;
        filtered.push(s);
    }
    let params = UnscentedParams::default();
    let u = urts_smooth(&filtered, &dynamics, &params)?;
    let l = linear_rts(&filtered, &dynamics.transition(), &dynamics.noise())
        .ok_or_else(|| crate::Error::Singular("predicted covariance".into()))?;
    let mut worst = 0.0_f64;
    for (a, b) in u.iter().zip(&l) {
        for i in 0..4 {
            worst = worst.max((a.x[i] - b.x[i]).abs() / b.x[i].abs().max(1e-12));
            for j in 0..4 {
                let scale = (b.p[(i, i)] * b.p[(j, j)]).sqrt();
                worst = worst.max((a.p[(i, j)] - b.p[(i, j)]).abs() / scale);
            }
        }
    }
    let single = urts_smooth(&filtered[..1], &dynamics, &params)? == filtered[..1];
    let seconds = t0.elapsed().as_secs_f64();
    Ok(Check {
        name: "urts-vs-linear-rts",
        pass: worst <= 1e-8 && single,
        detail: format!("{steps} steps, worst relative error {worst:.2e} (tol 1e-8), length-1 window unchanged: {single}"),
        seconds,
    })
}

/// All checks with the sizes used by the acceptance suite.
pub fn run_all(scenario: &Scenario, seed: u64) -> Result<Vec<Check>> {
    Ok(vec![
        check_lgbp(seed, 5)?,
        check_association(seed, 200)?,
        check_jacobians(&scenario.geometry, seed, 1000)?,
        check_smoother(seed, 30)?,
    ])
}
