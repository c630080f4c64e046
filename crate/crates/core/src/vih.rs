//! Virtual ionospheric height inference on the joint E/F field.
//!
//! Radar and ionosonde evidence is linearized about fixed heights and added
//! to the prior in canonical form. Loopy Gaussian belief propagation then
//! returns per-node marginals.

use nalgebra::{DVector, Matrix3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::EquivalentMeasurement;
use crate::geometry::{Layer, MeasurementModel};
use crate::gmrf::{JointField, SparsePrecision};
use crate::ionosonde::{canonical_update_iono, IonosondeMeasurement};

/// Joint-field nodes of `[hE(i_t), hE(i_r), hF(i_t), hF(i_r)]`.
pub fn used_nodes(cells: (usize, usize), nodes_per_layer: usize) -> [usize; 4] {
    let (it, ir) = cells;
    [it, ir, nodes_per_layer + it, nodes_per_layer + ir]
}

/// The four heights one target uses at one scan.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UsedVihs {
    pub cells: (usize, usize),
    pub nodes: [usize; 4],
    pub heights: [f64; 4],
    pub variances: [f64; 4],
}

impl UsedVihs {
    pub fn layer_of(slot: usize) -> Layer {
        if slot < 2 {
            Layer::E
        } else {
            Layer::F
        }
    }
}

/// Pick the used heights out of per-node marginals.
pub fn extract_used_vihs(
    mean: &DVector<f64>,
    var: &DVector<f64>,
    cells: (usize, usize),
    nodes_per_layer: usize,
) -> Result<UsedVihs> {
    let nodes = used_nodes(cells, nodes_per_layer);
    if nodes.iter().any(|&n| n >= mean.len() || n >= var.len()) {
        return Err(Error::Invalid(format!(
            "cells {cells:?} outside a {}-node field",
            mean.len()
        )));
    }
    Ok(UsedVihs {
        cells,
        nodes,
        heights: nodes.map(|n| mean[n]),
        variances: nodes.map(|n| var[n]),
    })
}

/// Additive canonical-form evidence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CanonicalUpdates {
    /// `(node, ΔQ_ii, Δη_i)`.
    pub nodes: Vec<(usize, f64, f64)>,
    /// `(i, j, ΔQ_ij)` with `i != j`.
    pub edges: Vec<(usize, usize, f64)>,
}

impl CanonicalUpdates {
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty() && self.edges.is_empty()
    }

    pub fn extend(&mut self, other: CanonicalUpdates) {
        self.nodes.extend(other.nodes);
        self.edges.extend(other.edges);
    }
}

/// Linearize one equivalent radar measurement about `(h0_t, h0_r)` at state
/// `x` and return its increments on the two reflection nodes.
pub fn canonical_update_radar(
    eq: &EquivalentMeasurement,
    x: &Vector4<f64>,
    h0: (f64, f64),
    cells: (usize, usize),
    model: &dyn MeasurementModel,
) -> Result<CanonicalUpdates> {
    let (h0t, h0r) = h0;
    let (ut, ur) = model.height_jacobian(x, h0t, h0r)?;
    let u = model.measure(x, h0t, h0r)?;
    let rinv: Matrix3<f64> = eq
        .r
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("equivalent measurement covariance".into()))?
        .inverse();
    let target = ut * h0t + ur * h0r + eq.y - u;
    let qt = (ut.transpose() * rinv * ut)[0];
    let qr = (ur.transpose() * rinv * ur)[0];
    let qtr = (ut.transpose() * rinv * ur)[0];
    let et = (ut.transpose() * rinv * target)[0];
    let er = (ur.transpose() * rinv * target)[0];

    let npl = model.nodes_per_layer();
    let nt = eq.mode.transmit_layer().offset(npl) + cells.0;
    let nr = eq.mode.receive_layer().offset(npl) + cells.1;
    let mut out = CanonicalUpdates::default();
    if nt == nr {
        out.nodes.push((nt, qt + qr + 2.0 * qtr, et + er));
    } else {
        out.nodes.push((nt, qt, et));
        out.nodes.push((nr, qr, er));
        out.edges.push((nt, nr, qtr));
    }
    Ok(out)
}

/// Ionosonde increments linearized at `h0` (the prior mean of each node).
pub fn iono_updates(
    soundings: &[IonosondeMeasurement],
    prior_mean: &DVector<f64>,
    nodes_per_layer: usize,
) -> Result<CanonicalUpdates> {
    let mut out = CanonicalUpdates::default();
    for s in soundings {
        let node = s.site.joint_node(nodes_per_layer);
        let h0 = *prior_mean
            .get(node)
            .ok_or_else(|| Error::Invalid(format!("ionosonde node {node} outside the field")))?;
        let (dq, de) = canonical_update_iono(s.z, &s.site, h0)?;
        out.nodes.push((node, dq, de));
    }
    Ok(out)
}

/// Prior plus every increment. Each increment is a positive semidefinite
/// quadratic form, so a positive definite prior stays positive definite;
/// the check here only guards against non-finite input.
pub fn assemble_posterior(field: &JointField, updates: &CanonicalUpdates) -> Result<(SparsePrecision, DVector<f64>)> {
    let n = field.n();
    let mut q = field.q.clone();
    let mut eta = field.eta.clone();
    for &(i, dq, de) in &updates.nodes {
        if i >= n {
            return Err(Error::Invalid(format!("update node {i} outside a {n}-node field")));
        }
        if !dq.is_finite() || !de.is_finite() || dq < 0.0 {
            return Err(Error::NotPositiveDefinite(format!(
                "node {i} increment ({dq}, {de})"
            )));
        }
        q.add_diag(i, dq);
        eta[i] += de;
    }
    for &(i, j, dq) in &updates.edges {
        if i >= n || j >= n || i == j {
            return Err(Error::Invalid(format!("bad update edge ({i}, {j})")));
        }
        if !dq.is_finite() {
            return Err(Error::NotPositiveDefinite(format!("edge ({i}, {j}) increment {dq}")));
        }
        q.add_edge(i, j, dq);
    }
    Ok((q, eta))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LgbpOptions {
    pub max_iter: usize,
    /// Stop when no message moves by more than this.
    pub tol: f64,
    /// Weight kept on the previous message, in `[0, 1)`.
    pub damping: f64,
}

impl Default for LgbpOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-8,
            damping: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LgbpResult {
    pub mean: DVector<f64>,
    pub var: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Gaussian belief propagation with a flooding schedule.
pub fn lgbp(q: &SparsePrecision, eta: &DVector<f64>, opts: &LgbpOptions) -> Result<LgbpResult> {
    let n = q.n();
    if eta.len() != n {
        return Err(Error::Invalid(format!("potential has {} entries for {n} nodes", eta.len())));
    }
    if !(0.0..1.0).contains(&opts.damping) {
        return Err(Error::Invalid(format!("damping {} not in [0, 1)", opts.damping)));
    }
    // rev[i][k]: position of i in the neighbor list of its k-th neighbor.
    let rev: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            q.neighbors(i)
                .iter()
                .map(|&(j, _)| {
                    q.neighbors(j)
                        .iter()
                        .position(|&(k, _)| k == i)
                        .expect("symmetric adjacency")
                })
                .collect()
        })
        .collect();
    // Incoming messages, in_q[i][k] from the k-th neighbor of i.
    let mut in_q: Vec<Vec<f64>> = (0..n).map(|i| vec![0.0; q.neighbors(i).len()]).collect();
    let mut in_e = in_q.clone();
    let mut next_q = in_q.clone();
    let mut next_e = in_q.clone();

    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let mut delta: f64 = 0.0;
        for i in 0..n {
            let tot_q = q.diag(i) + in_q[i].iter().sum::<f64>();
            let tot_e = eta[i] + in_e[i].iter().sum::<f64>();
            for (k, &(j, qij)) in q.neighbors(i).iter().enumerate() {
                let q_ex = tot_q - in_q[i][k];
                if !(q_ex > 0.0) {
                    return Err(Error::NotPositiveDefinite(format!(
                        "cavity precision {q_ex} at node {i} (iteration {iterations})"
                    )));
                }
                let e_ex = tot_e - in_e[i][k];
                let slot = rev[i][k];
                let old_q = in_q[j][slot];
                let old_e = in_e[j][slot];
                let mq = -qij * qij / q_ex;
                let me = -qij * e_ex / q_ex;
                let mq = opts.damping * old_q + (1.0 - opts.damping) * mq;
                let me = opts.damping * old_e + (1.0 - opts.damping) * me;
                delta = delta.max((mq - old_q).abs()).max((me - old_e).abs());
                next_q[j][slot] = mq;
                next_e[j][slot] = me;
            }
        }
        std::mem::swap(&mut in_q, &mut next_q);
        std::mem::swap(&mut in_e, &mut next_e);
        if delta < opts.tol {
            converged = true;
            break;
        }
    }
    if n > 0 && q.edge_count() == 0 {
        converged = true;
    }

    let mut mean = DVector::zeros(n);
    let mut var = DVector::zeros(n);
    for i in 0..n {
        let qi = q.diag(i) + in_q[i].iter().sum::<f64>();
        if !(qi > 0.0) {
            return Err(Error::NotPositiveDefinite(format!("marginal precision {qi} at node {i}")));
        }
        let ei = eta[i] + in_e[i].iter().sum::<f64>();
        mean[i] = ei / qi;
        var[i] = 1.0 / qi;
    }
    Ok(LgbpResult {
        mean,
        var,
        iterations,
        converged,
    })
}

/// LGBP on the potential re-centered at `reference`: solves for the offset
/// from `reference` and adds it back. The fixed point is unchanged; messages
/// start near their final values when `reference` is close to the answer.
pub fn lgbp_about(
    q: &SparsePrecision,
    eta: &DVector<f64>,
    reference: &DVector<f64>,
    opts: &LgbpOptions,
) -> Result<LgbpResult> {
    let centered = eta - q.mul_vec(reference);
    let mut r = lgbp(q, &centered, opts)?;
    r.mean += reference;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::LinearMeasurement;
    use crate::geometry::{Grid, PropagationMode, RadarGeometry};
    use crate::gmrf::{build_precision, combine, dense_marginals};
    use crate::ionosonde::{delay_variance_for_height_std, g_vertical, IonosondeSite, SiteKind};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, Matrix3x4, Vector3};

    fn joint() -> JointField {
        let e = build_precision(18, 8, 0.082, -0.0205, 110.0).unwrap();
        let f = build_precision(18, 8, 0.0587, -0.0147, 220.0).unwrap();
        combine(&e, &f).unwrap()
    }

    fn table_geom() -> RadarGeometry {
        RadarGeometry::new(40.0, Grid::covering([480.0, 750.0], [30.0, 150.0], 15.0).unwrap()).unwrap()
    }

    #[test]
    fn diagonal_precision_needs_no_messages() {
        let q = SparsePrecision::from_diagonal(vec![2.0, 4.0]);
        let eta = DVector::from_vec(vec![1.0, 2.0]);
        let r = lgbp(&q, &eta, &LgbpOptions::default()).unwrap();
        assert!(r.converged);
        assert_eq!(r.mean.as_slice(), &[0.5, 0.5]);
        assert_eq!(r.var.as_slice(), &[0.5, 0.25]);
    }

    #[test]
    fn chain_is_exact() {
        let mut q = SparsePrecision::from_diagonal(vec![2.0, 3.0, 1.5]);
        q.add_edge(0, 1, -0.7);
        q.add_edge(1, 2, 0.4);
        let eta = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let r = lgbp(&q, &eta, &LgbpOptions::default()).unwrap();
        let (m, v) = dense_marginals(&q.to_dense(), &eta).unwrap();
        assert!(r.converged);
        for i in 0..3 {
            assert_relative_eq!(r.mean[i], m[i], max_relative = 1e-12);
            assert_relative_eq!(r.var[i], v[i], max_relative = 1e-12);
        }
    }

    #[test]
    fn lattice_means_match_dense_solve() {
        let j = joint();
        let mut upd = CanonicalUpdates::default();
        upd.nodes.push((3, 0.04, 0.04 * 118.0));
        upd.nodes.push((150, 0.02, 0.02 * 230.0));
        let (q, eta) = assemble_posterior(&j, &upd).unwrap();
        let opts = LgbpOptions {
            max_iter: 5000,
            tol: 1e-12,
            damping: 0.0,
        };
        let r = lgbp_about(&q, &eta, &j.mu, &opts).unwrap();
        assert!(r.converged, "{} iterations", r.iterations);
        let (m, _) = dense_marginals(&q.to_dense(), &eta).unwrap();
        for i in 0..j.n() {
            assert_relative_eq!(r.mean[i], m[i], max_relative = 1e-6);
        }
    }

    #[test]
    fn no_evidence_is_identity() {
        let j = joint();
        let (q, eta) = assemble_posterior(&j, &CanonicalUpdates::default()).unwrap();
        assert_eq!(q, j.q);
        assert_eq!(eta, j.eta);
    }

    #[test]
    fn ionosonde_changes_one_entry() {
        let j = joint();
        let site = IonosondeSite::new(SiteKind::Vertical, Layer::F, 72, delay_variance_for_height_std(10.0)).unwrap();
        let s = IonosondeMeasurement {
            site,
            z: g_vertical(230.0),
            scan: 1,
        };
        let upd = iono_updates(&[s], &j.mu, 144).unwrap();
        let (q, eta) = assemble_posterior(&j, &upd).unwrap();
        let dq = q.to_dense() - j.q.to_dense();
        let nonzero: Vec<_> = dq.iter().enumerate().filter(|(_, v)| **v != 0.0).collect();
        assert_eq!(nonzero.len(), 1);
        assert_relative_eq!(q.diag(144 + 72) - j.q.diag(144 + 72), 0.01, max_relative = 1e-12);
        let de = &eta - &j.eta;
        assert_eq!(de.iter().filter(|v| **v != 0.0).count(), 1);
    }

    fn ff_measurement(y: Vector3<f64>, r: Matrix3<f64>) -> EquivalentMeasurement {
        EquivalentMeasurement {
            mode: PropagationMode::FF,
            y,
            r,
            weight: 1.0,
        }
    }

    #[test]
    fn radar_update_matches_least_squares_oracle() {
        // Target 1, mode FF, measurement offset from the prior-mean image.
        let g = table_geom();
        let x = Vector4::new(1100.0, 0.15, 0.09472, 1.52665e-4);
        let cells = g.subregions(&x).unwrap();
        let r = Matrix3::from_diagonal(&Vector3::new(25.0, 1e-6, 9e-6));
        let y = g.measure(&x, 228.0, 214.0).unwrap();
        let upd = canonical_update_radar(&ff_measurement(y, r), &x, (220.0, 220.0), cells, &g).unwrap();

        // Finite-difference linearization solved as a weighted least-squares
        // information pair.
        let step = 1e-3;
        let u0 = g.measure(&x, 220.0, 220.0).unwrap();
        let a_t = (g.measure(&x, 220.0 + step, 220.0).unwrap() - g.measure(&x, 220.0 - step, 220.0).unwrap()) / (2.0 * step);
        let a_r = (g.measure(&x, 220.0, 220.0 + step).unwrap() - g.measure(&x, 220.0, 220.0 - step).unwrap()) / (2.0 * step);
        let a = nalgebra::Matrix3x2::from_columns(&[a_t, a_r]);
        let w = r.try_inverse().unwrap();
        let info = a.transpose() * w * a;
        let pot = a.transpose() * w * (y - u0 + a * nalgebra::Vector2::new(220.0, 220.0));

        let (nt, nr) = (144 + cells.0, 144 + cells.1);
        assert_ne!(nt, nr);
        let node = |n: usize| upd.nodes.iter().find(|u| u.0 == n).copied().unwrap();
        assert_relative_eq!(node(nt).1, info[(0, 0)], max_relative = 1e-5);
        assert_relative_eq!(node(nr).1, info[(1, 1)], max_relative = 1e-5);
        assert_relative_eq!(upd.edges[0].2, info[(0, 1)], max_relative = 1e-5);
        assert_relative_eq!(node(nt).2, pot[0], max_relative = 1e-5);
        assert_relative_eq!(node(nr).2, pot[1], max_relative = 1e-5);
    }

    #[test]
    fn zero_innovation_keeps_linearization_point() {
        let model = LinearMeasurement {
            h: Matrix3x4::identity(),
            dt: Vector3::new(1.0, 0.0, 0.3),
            dr: Vector3::new(1.0, 0.5, 0.0),
            offset: Vector3::zeros(),
            cells: (0, 1),
            nodes_per_layer: 2,
        };
        let x = Vector4::new(5.0, 1.0, 0.1, 0.0);
        let y = model.measure(&x, 220.0, 215.0).unwrap();
        let upd = canonical_update_radar(&ff_measurement(y, Matrix3::identity()), &x, (220.0, 215.0), (0, 1), &model).unwrap();
        // Flat prior over the two F nodes: solve the 2x2 system directly.
        let mut q = DMatrix::<f64>::zeros(2, 2);
        let mut eta = DVector::<f64>::zeros(2);
        for &(n, dq, de) in &upd.nodes {
            q[(n - 2, n - 2)] += dq;
            eta[n - 2] += de;
        }
        for &(i, j, dq) in &upd.edges {
            q[(i - 2, j - 2)] += dq;
            q[(j - 2, i - 2)] += dq;
        }
        let h = q.lu().solve(&eta).unwrap();
        assert_relative_eq!(h[0], 220.0, max_relative = 1e-12);
        assert_relative_eq!(h[1], 215.0, max_relative = 1e-12);
    }

    #[test]
    fn infinite_noise_means_no_information() {
        let g = table_geom();
        let x = Vector4::new(1100.0, 0.15, 0.09472, 1.52665e-4);
        let cells = g.subregions(&x).unwrap();
        let y = g.measure(&x, 110.0, 220.0).unwrap();
        let eq = EquivalentMeasurement {
            mode: PropagationMode::EF,
            y,
            r: Matrix3::identity() * 1e30,
            weight: 1e-30,
        };
        let upd = canonical_update_radar(&eq, &x, (110.0, 220.0), cells, &g).unwrap();
        assert!(upd.nodes.iter().all(|n| n.1.abs() < 1e-25 && n.2.abs() < 1e-22));
        // EF links an E node to an F node.
        assert_eq!(upd.edges[0].0, cells.0);
        assert_eq!(upd.edges[0].1, 144 + cells.1);
    }

    #[test]
    fn shared_node_folds_cross_term() {
        let model = LinearMeasurement {
            h: Matrix3x4::identity(),
            dt: Vector3::new(1.0, 0.0, 0.0),
            dr: Vector3::new(1.0, 0.0, 0.0),
            offset: Vector3::zeros(),
            cells: (3, 3),
            nodes_per_layer: 5,
        };
        let x = Vector4::zeros();
        let eq = EquivalentMeasurement {
            mode: PropagationMode::EE,
            y: Vector3::new(230.0, 0.0, 0.0),
            r: Matrix3::identity(),
            weight: 1.0,
        };
        let upd = canonical_update_radar(&eq, &x, (110.0, 110.0), (3, 3), &model).unwrap();
        assert!(upd.edges.is_empty());
        assert_eq!(upd.nodes, vec![(3, 4.0, 2.0 * 230.0)]);
    }

    #[test]
    fn extraction_is_a_projection() {
        let mut mean = DVector::from_fn(288, |i, _| i as f64);
        let var = DVector::from_element(288, 1.0);
        let a = extract_used_vihs(&mean, &var, (5, 7), 144).unwrap();
        assert_eq!(a.heights, [5.0, 7.0, 149.0, 151.0]);
        mean[100] = -1.0;
        assert_eq!(extract_used_vihs(&mean, &var, (5, 7), 144).unwrap(), a);
        assert!(extract_used_vihs(&mean, &var, (5, 200), 144).is_err());
    }
}
