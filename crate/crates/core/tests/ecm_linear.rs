//! ECM on an exactly linear measurement model, checked against dense
//! Gaussian solves.

use std::ops::AddAssign;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x4, Matrix4, Vector3, Vector4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use othr_ecm::association::{ClutterModel, Origin};
use othr_ecm::ecm::{AssociationMode, EcmConfig, Scan, Tracker, VihMode, WindowResult};
use othr_ecm::estimation::{mode_heights, predict, ConstantVelocity, Dynamics, FilterState, LinearMeasurement};
use othr_ecm::geometry::PropagationMode;
use othr_ecm::gmrf::{build_precision, combine, JointField};
use othr_ecm::vih::{used_nodes, LgbpOptions};

const NPL: usize = 4;
const CELLS: (usize, usize) = (0, 3);

struct Setup {
    model: LinearMeasurement,
    dynamics: ConstantVelocity,
    field: JointField,
    r: [Matrix3<f64>; 4],
    prior: FilterState,
}

fn setup() -> Setup {
    let model = LinearMeasurement {
        h: Matrix3x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0),
        dt: Vector3::new(0.6, 0.0, 2e-3),
        dr: Vector3::new(0.4, 0.0, 1e-3),
        offset: Vector3::new(10.0, 0.0, 0.0),
        cells: CELLS,
        nodes_per_layer: NPL,
    };
    let e = build_precision(2, 2, 0.05, -0.01, 110.0).unwrap();
    let f = build_precision(2, 2, 0.04, -0.008, 220.0).unwrap();
    let r = Matrix3::from_diagonal(&Vector3::new(1.0, 0.01, 1e-4));
    Setup {
        model,
        dynamics: ConstantVelocity {
            dt: 20.0,
            noise_std: [0.5, 0.05, 0.01, 0.001],
        },
        field: combine(&e, &f).unwrap(),
        r: [r, r * 1.5, r * 2.0, r * 3.0],
        prior: FilterState::new(
            Vector4::new(1200.0, 0.1, 0.1, 1e-4),
            Matrix4::from_diagonal(&Vector4::new(4.0, 0.01, 1e-3, 1e-5)),
        ),
    }
}

fn tracker<'a>(s: &'a Setup, cfg: EcmConfig) -> Tracker<'a> {
    Tracker::new(
        &s.model,
        &s.dynamics,
        s.r,
        [0.7; 4],
        ClutterModel::new(1e-3, 1e4).unwrap(),
        &s.field,
        cfg,
    )
    .unwrap()
}

fn tight(max_iter: usize) -> EcmConfig {
    EcmConfig {
        max_iter,
        tol_range_km: 1e-10,
        tol_bearing_rad: 1e-13,
        tol_vih_km: 1e-10,
        lgbp: LgbpOptions {
            max_iter: 5000,
            tol: 1e-13,
            damping: 0.0,
        },
        vih_mode: VihMode::Joint,
        association: AssociationMode::Truth,
        ..EcmConfig::default()
    }
}

/// True states and heights for `len` scans, with every mode detected.
fn scans(s: &Setup, len: usize, noisy: bool, seed: u64) -> (Vec<Scan>, Vec<Vector4<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = Normal::new(0.0, 1.0).unwrap();
    let mut x = s.dynamics.propagate(&s.prior.x);
    let offsets = [3.0, -2.0, 5.0, -4.0];
    let mut out = Vec::new();
    let mut states = Vec::new();
    for k in 0..len {
        let h: DVector<f64> = if noisy {
            DVector::from_fn(2 * NPL, |i, _| s.field.mu[i] + offsets[i % 4] + k as f64)
        } else {
            s.field.mu.clone()
        };
        let beta = used_nodes(CELLS, NPL).map(|n| h[n]);
        let mut radar = Vec::new();
        let mut labels = Vec::new();
        for mode in PropagationMode::ALL {
            let (ht, hr) = mode_heights(&beta, mode);
            let mut y = s.model.h * x + s.model.dt * ht + s.model.dr * hr + s.model.offset;
            if noisy {
                let r = s.r[mode.index()];
                for i in 0..3 {
                    y[i] += r[(i, i)].sqrt() * std.sample(&mut rng);
                }
            }
            radar.push(y);
            labels.push(Origin::Target { target: 0, mode });
        }
        out.push(Scan {
            index: k + 1,
            radar,
            labels,
            soundings: Vec::new(),
        });
        states.push(x);
        x = s.dynamics.propagate(&x);
    }
    (out, states)
}

/// Information form of the window posterior over `[x_1..x_K, h_1..h_K]`.
fn information(s: &Setup, scans: &[Scan]) -> (DMatrix<f64>, DVector<f64>) {
    let len = scans.len();
    let nh = 2 * NPL;
    let dim = 4 * len + nh * len;
    let xi = |k: usize| 4 * k;
    let hi = |k: usize| 4 * len + nh * k;
    let mut lam = DMatrix::zeros(dim, dim);
    let mut b = DVector::zeros(dim);

    let first = predict(&s.prior, &s.dynamics);
    let pinv = first.p.try_inverse().unwrap();
    lam.view_mut((0, 0), (4, 4)).add_assign(&pinv);
    b.rows_mut(0, 4).add_assign(&(pinv * first.x));

    let f = s.dynamics.transition();
    let binv = s.dynamics.noise().try_inverse().unwrap();
    for k in 1..len {
        let mut a = DMatrix::zeros(4, dim);
        a.view_mut((0, xi(k - 1)), (4, 4)).copy_from(&(-f));
        a.view_mut((0, xi(k)), (4, 4)).copy_from(&Matrix4::identity());
        let binv_d = DMatrix::from_iterator(4, 4, binv.iter().copied());
        lam += a.transpose() * binv_d * &a;
    }

    let nodes = used_nodes(CELLS, NPL);
    for (k, scan) in scans.iter().enumerate() {
        for (y, label) in scan.radar.iter().zip(&scan.labels) {
            let Origin::Target { mode, .. } = label else { continue };
            let (t, r) = mode.used_vih_slots();
            let mut g = DMatrix::zeros(3, dim);
            g.view_mut((0, xi(k)), (3, 4)).copy_from(&s.model.h);
            g.view_mut((0, hi(k) + nodes[t]), (3, 1)).add_assign(&s.model.dt);
            g.view_mut((0, hi(k) + nodes[r]), (3, 1)).add_assign(&s.model.dr);
            let rinv = s.r[mode.index()].try_inverse().unwrap();
            let rinv = DMatrix::from_iterator(3, 3, rinv.iter().copied());
            let resid = DVector::from_iterator(3, (y - s.model.offset).iter().copied());
            lam += g.transpose() * &rinv * &g;
            b += g.transpose() * rinv * resid;
        }
        let q = s.field.q.to_dense();
        lam.view_mut((hi(k), hi(k)), (nh, nh)).add_assign(&q);
        b.rows_mut(hi(k), nh).add_assign(&s.field.eta);
    }
    (lam, b)
}

fn solve(lam: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    lam.clone().cholesky().expect("positive definite").solve(rhs)
}

fn window_vector(w: &WindowResult) -> DVector<f64> {
    let mut v: Vec<f64> = w.scans.iter().flat_map(|s| s.states[0].x.iter().copied()).collect();
    for s in &w.scans {
        v.extend(s.field.mean.iter());
    }
    DVector::from_vec(v)
}

fn assert_close(got: &DVector<f64>, want: &DVector<f64>, tol: f64) {
    for (i, (g, w)) in got.iter().zip(want.iter()).enumerate() {
        assert!(
            (g - w).abs() <= tol * w.abs().max(1.0),
            "component {i}: got {g}, want {w}"
        );
    }
}

#[test]
fn one_iteration_is_block_conditional_map() {
    let s = setup();
    let (scans, _) = scans(&s, 3, true, 11);
    let w = tracker(&s, tight(1)).run_window(&scans, &[s.prior], &[0]).unwrap();
    assert_eq!(w.iterations.len(), 1);

    let (lam, b) = information(&s, &scans);
    let nx = 4 * scans.len();
    let nh = lam.nrows() - nx;
    let h0 = DVector::from_iterator(nh, (0..scans.len()).flat_map(|_| s.field.mu.iter().copied()));
    let lxx = lam.view((0, 0), (nx, nx)).into_owned();
    let lxh = lam.view((0, nx), (nx, nh)).into_owned();
    let lhh = lam.view((nx, nx), (nh, nh)).into_owned();
    let x = solve(&lxx, &(b.rows(0, nx) - &lxh * &h0));
    let h = solve(&lhh, &(b.rows(nx, nh) - lxh.transpose() * &x));
    let mut want = x.as_slice().to_vec();
    want.extend(h.iter());
    assert_close(&window_vector(&w), &DVector::from_vec(want), 1e-6);
}

#[test]
fn converged_window_is_joint_map() {
    let s = setup();
    let (scans, _) = scans(&s, 3, true, 12);
    let w = tracker(&s, tight(500)).run_window(&scans, &[s.prior], &[0]).unwrap();
    assert!(w.converged, "{} iterations", w.iterations.len());
    let (lam, b) = information(&s, &scans);
    assert_close(&window_vector(&w), &solve(&lam, &b), 1e-6);
}

#[test]
fn objective_never_decreases() {
    let s = setup();
    for seed in 0..5 {
        let (scans, _) = scans(&s, 4, true, seed);
        let w = tracker(&s, tight(30)).run_window(&scans, &[s.prior], &[0]).unwrap();
        assert!(w.iterations.len() > 2);
        for pair in w.iterations.windows(2) {
            assert!(
                pair[1].objective >= pair[0].objective - 1e-6,
                "seed {seed}: {} then {}",
                pair[0].objective,
                pair[1].objective
            );
        }
    }
}

#[test]
fn noise_free_window_converges_to_truth() {
    let s = setup();
    let (scans, truth) = scans(&s, 3, false, 0);
    let cfg = EcmConfig {
        association: AssociationMode::Truth,
        ..EcmConfig::default()
    };
    let w = tracker(&s, cfg).run_window(&scans, &[s.prior], &[0]).unwrap();
    assert!(w.converged);
    assert!(w.iterations.len() <= 3, "{} iterations", w.iterations.len());
    for (est, x) in w.scans.iter().zip(&truth) {
        assert!((est.states[0].x - x).amax() < 1e-6);
        assert!((&est.field.mean - &s.field.mu).amax() < 1e-6);
    }
}

#[test]
fn gated_association_finds_isolated_returns() {
    let s = setup();
    let (scans, _) = scans(&s, 3, true, 3);
    let truth = tracker(&s, tight(50)).run_window(&scans, &[s.prior], &[0]).unwrap();
    let gated = tracker(
        &s,
        EcmConfig {
            association: AssociationMode::Gated,
            ..tight(50)
        },
    )
    .run_window(&scans, &[s.prior], &[0])
    .unwrap();
    let (a, b) = (window_vector(&truth), window_vector(&gated));
    assert!((a - b).amax() < 0.5);
}

#[test]
fn window_is_deterministic() {
    let s = setup();
    let (scans, _) = scans(&s, 3, true, 4);
    let cfg = EcmConfig {
        association: AssociationMode::Gated,
        ..EcmConfig::default()
    };
    let a = tracker(&s, cfg).run_window(&scans, &[s.prior], &[0]).unwrap();
    let b = tracker(&s, cfg).run_window(&scans, &[s.prior], &[0]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn fixed_mode_keeps_prior_heights() {
    let s = setup();
    let (scans, _) = scans(&s, 2, true, 5);
    let cfg = EcmConfig {
        vih_mode: VihMode::Fixed,
        ..tight(10)
    };
    let w = tracker(&s, cfg).run_window(&scans, &[s.prior], &[0]).unwrap();
    for est in &w.scans {
        assert_eq!(est.field.mean, s.field.mu);
    }
}
