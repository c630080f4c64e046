//! Lattice Gaussian Markov random fields in canonical form.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Sparse symmetric matrix stored as a diagonal plus per-node neighbor lists.
///
/// Every off-diagonal entry is kept twice, once in each endpoint's list, with
/// identical values, so lookups and message passing see a symmetric graph.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsePrecision {
    diag: Vec<f64>,
    neighbors: Vec<Vec<(usize, f64)>>,
}

impl SparsePrecision {
    pub fn zeros(n: usize) -> Self {
        Self {
            diag: vec![0.0; n],
            neighbors: vec![Vec::new(); n],
        }
    }

    pub fn from_diagonal(diag: Vec<f64>) -> Self {
        let n = diag.len();
        Self {
            diag,
            neighbors: vec![Vec::new(); n],
        }
    }

    pub fn n(&self) -> usize {
        self.diag.len()
    }

    pub fn diag(&self, i: usize) -> f64 {
        self.diag[i]
    }

    pub fn diagonal(&self) -> &[f64] {
        &self.diag
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.neighbors[i]
    }

    /// Entry `(i, j)`; zero when no edge exists.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return self.diag[i];
        }
        self.neighbors[i]
            .iter()
            .find(|(k, _)| *k == j)
            .map_or(0.0, |(_, v)| *v)
    }

    pub fn add_diag(&mut self, i: usize, v: f64) {
        self.diag[i] += v;
    }

    /// Add `v` to both `(i, j)` and `(j, i)`, creating the edge if needed.
    pub fn add_edge(&mut self, i: usize, j: usize, v: f64) {
        assert_ne!(i, j, "self-edges belong on the diagonal");
        for (a, b) in [(i, j), (j, i)] {
            match self.neighbors[a].iter_mut().find(|(k, _)| *k == b) {
                Some(entry) => entry.1 += v,
                None => self.neighbors[a].push((b, v)),
            }
        }
    }

    /// Undirected edges `(i, j, Q_ij)` with `i < j`, in node order.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for (i, list) in self.neighbors.iter().enumerate() {
            for &(j, v) in list {
                if i < j {
                    out.push((i, j, v));
                }
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.n(), |i, _| {
            self.diag[i] * x[i] + self.neighbors[i].iter().map(|&(j, v)| v * x[j]).sum::<f64>()
        })
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = self.diag[i];
            for &(j, v) in &self.neighbors[i] {
                m[(i, j)] = v;
            }
        }
        m
    }

    /// Block-diagonal stack of `self` followed by `other`.
    pub fn block_diag(&self, other: &SparsePrecision) -> SparsePrecision {
        let off = self.n();
        let mut diag = self.diag.clone();
        diag.extend_from_slice(&other.diag);
        let mut neighbors = self.neighbors.clone();
        neighbors.extend(
            other
                .neighbors
                .iter()
                .map(|l| l.iter().map(|&(j, v)| (j + off, v)).collect()),
        );
        SparsePrecision { diag, neighbors }
    }
}

/// Gaussian field on an `nx × ny` 4-neighbor lattice, nodes numbered X-fastest.
#[derive(Clone, Debug)]
pub struct GmrfField {
    pub nx: usize,
    pub ny: usize,
    pub q: SparsePrecision,
    pub eta: DVector<f64>,
    pub mu: DVector<f64>,
}

/// First-order lattice field: `diag` on the diagonal and `offdiag` between
/// horizontally or vertically adjacent cells, constant mean `mean`.
pub fn build_precision(nx: usize, ny: usize, diag: f64, offdiag: f64, mean: f64) -> Result<GmrfField> {
    if nx == 0 || ny == 0 {
        return Err(Error::Invalid(format!("empty lattice {nx}x{ny}")));
    }
    let n = nx * ny;
    let mut q = SparsePrecision::from_diagonal(vec![diag; n]);
    for iy in 0..ny {
        for ix in 0..nx {
            let i = iy * nx + ix;
            if ix + 1 < nx {
                q.add_edge(i, i + 1, offdiag);
            }
            if iy + 1 < ny {
                q.add_edge(i, i + nx, offdiag);
            }
        }
    }
    if q.to_dense().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite(format!(
            "lattice precision with diag {diag}, offdiag {offdiag}"
        )));
    }
    let mu = DVector::from_element(n, mean);
    let eta = q.mul_vec(&mu);
    Ok(GmrfField { nx, ny, q, eta, mu })
}

impl GmrfField {
    pub fn n(&self) -> usize {
        self.q.n()
    }

    /// Cached factorization for repeated draws.
    pub fn sampler(&self) -> Result<Sampler> {
        Sampler::new(&self.q, self.mu.clone())
    }

    /// One draw from `N(mu, Q⁻¹)` using a generator seeded with `seed`.
    pub fn sample(&self, seed: u64) -> Result<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(self.sampler()?.draw(&mut rng))
    }
}

/// Exact sampler: with `Q = L Lᵀ`, `x = μ + L⁻ᵀ z` has covariance `Q⁻¹`.
#[derive(Clone, Debug)]
pub struct Sampler {
    l: DMatrix<f64>,
    mu: DVector<f64>,
}

impl Sampler {
    pub fn new(q: &SparsePrecision, mu: DVector<f64>) -> Result<Self> {
        let chol = q
            .to_dense()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("precision for sampling".into()))?;
        Ok(Self { l: chol.unpack(), mu })
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.mu.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = self
            .l
            .tr_solve_lower_triangular(&z)
            .expect("Cholesky factor has a positive diagonal");
        &self.mu + x
    }
}

/// E and F layers stacked into one field. E nodes come first.
#[derive(Clone, Debug)]
pub struct JointField {
    pub nodes_per_layer: usize,
    pub q: SparsePrecision,
    pub eta: DVector<f64>,
    pub mu: DVector<f64>,
}

pub fn combine(e: &GmrfField, f: &GmrfField) -> Result<JointField> {
    if e.n() != f.n() {
        return Err(Error::Invalid(format!(
            "layers must share a lattice, got {} and {} nodes",
            e.n(),
            f.n()
        )));
    }
    let stack = |a: &DVector<f64>, b: &DVector<f64>| {
        DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
    };
    Ok(JointField {
        nodes_per_layer: e.n(),
        q: e.q.block_diag(&f.q),
        eta: stack(&e.eta, &f.eta),
        mu: stack(&e.mu, &f.mu),
    })
}

impl JointField {
    pub fn n(&self) -> usize {
        self.q.n()
    }
}

/// Exact means `Q⁻¹η` and variances `diag(Q⁻¹)` by dense Cholesky.
pub fn dense_marginals(q: &DMatrix<f64>, eta: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    let chol = q
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("precision is not positive definite".into()))?;
    let mean = chol.solve(eta);
    let var = chol.inverse().diagonal();
    Ok((mean, var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn e_layer() -> GmrfField {
        build_precision(18, 8, 0.082, -0.0205, 110.0).unwrap()
    }

    fn f_layer() -> GmrfField {
        build_precision(18, 8, 0.0587, -0.0147, 220.0).unwrap()
    }

    #[test]
    fn sparsity_is_the_four_neighbor_lattice() {
        let f = e_layer();
        assert_eq!(f.q.edge_count(), 17 * 8 + 18 * 7);
        for (i, j, v) in f.q.edges() {
            let (xi, yi) = (i % 18, i / 18);
            let (xj, yj) = (j % 18, j / 18);
            assert_eq!(xi.abs_diff(xj) + yi.abs_diff(yj), 1);
            assert_eq!(v, -0.0205);
        }
        assert_eq!(f.q.neighbors(0).len(), 2);
        assert_eq!(f.q.neighbors(19).len(), 4);
    }

    #[test]
    fn potential_equals_precision_times_mean() {
        for f in [e_layer(), f_layer()] {
            let dense = f.q.to_dense() * &f.mu;
            for i in 0..f.n() {
                assert_relative_eq!(f.eta[i], dense[i], max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn square_lattice_from_table_is_positive_definite() {
        assert!(build_precision(12, 12, 0.082, -0.0205, 110.0).is_ok());
        assert!(build_precision(12, 12, 0.0587, -0.0147, 220.0).is_ok());
    }

    #[test]
    fn non_pd_parameters_are_rejected() {
        let err = build_precision(4, 4, 0.01, -0.02, 0.0).unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite(_)));
    }

    #[test]
    fn single_node_variance_is_reciprocal_diag() {
        let f = build_precision(1, 1, 0.25, -1.0, 3.0).unwrap();
        let (m, v) = dense_marginals(&f.q.to_dense(), &f.eta).unwrap();
        assert_relative_eq!(m[0], 3.0, max_relative = 1e-15);
        assert_relative_eq!(v[0], 4.0, max_relative = 1e-15);
    }

    #[test]
    fn two_node_chain_matches_closed_form_inverse() {
        let q = DMatrix::from_row_slice(2, 2, &[2.0, -0.5, -0.5, 1.0]);
        let eta = DVector::from_vec(vec![1.0, 2.0]);
        let (m, v) = dense_marginals(&q, &eta).unwrap();
        let det = 2.0 - 0.25;
        assert_relative_eq!(v[0], 1.0 / det, max_relative = 1e-14);
        assert_relative_eq!(v[1], 2.0 / det, max_relative = 1e-14);
        assert_relative_eq!(m[0], (1.0 + 0.5 * 2.0) / det, max_relative = 1e-14);
        assert_relative_eq!(m[1], (0.5 + 2.0 * 2.0) / det, max_relative = 1e-14);
    }

    #[test]
    fn dense_marginals_agree_with_lu_route() {
        let f = f_layer();
        let q = f.q.to_dense();
        let (m, v) = dense_marginals(&q, &f.eta).unwrap();
        let inv = q.clone().lu().try_inverse().unwrap();
        let m2 = &inv * &f.eta;
        for i in 0..f.n() {
            assert_relative_eq!(m[i], m2[i], max_relative = 1e-10);
            assert_relative_eq!(v[i], inv[(i, i)], max_relative = 1e-10);
        }
    }

    #[test]
    fn combined_field_keeps_layer_marginals() {
        let (e, f) = (e_layer(), f_layer());
        let j = combine(&e, &f).unwrap();
        assert_eq!(j.n(), 288);
        for (a, b, _) in j.q.edges() {
            assert_eq!(a < 144, b < 144, "cross-layer edge {a}-{b}");
        }
        let (mj, vj) = dense_marginals(&j.q.to_dense(), &j.eta).unwrap();
        let (me, ve) = dense_marginals(&e.q.to_dense(), &e.eta).unwrap();
        let (mf, vf) = dense_marginals(&f.q.to_dense(), &f.eta).unwrap();
        for i in 0..144 {
            assert_relative_eq!(mj[i], me[i], max_relative = 1e-12);
            assert_relative_eq!(vj[i], ve[i], max_relative = 1e-10);
            assert_relative_eq!(mj[144 + i], mf[i], max_relative = 1e-12);
            assert_relative_eq!(vj[144 + i], vf[i], max_relative = 1e-10);
        }
    }

    #[test]
    fn table_lattice_marginal_std_range() {
        // The diagonal is constant, so nodes with fewer neighbors borrow less
        // variance from the field and the corners end up least uncertain.
        // Either way the values sit well below 11 km / 13 km.
        let (_, ve) = dense_marginals(&e_layer().q.to_dense(), &e_layer().eta).unwrap();
        let (_, vf) = dense_marginals(&f_layer().q.to_dense(), &f_layer().eta).unwrap();
        let std = |v: &DVector<f64>| v.iter().map(|x| x.sqrt()).collect::<Vec<_>>();
        let se = std(&ve);
        let sf = std(&vf);
        let (emin, emax) = se.iter().fold((f64::MAX, 0.0f64), |(a, b), &s| (a.min(s), b.max(s)));
        let (fmin, fmax) = sf.iter().fold((f64::MAX, 0.0f64), |(a, b), &s| (a.min(s), b.max(s)));
        assert!((3.8..3.9).contains(&emin) && (5.0..5.2).contains(&emax), "{emin} {emax}");
        assert!((4.5..4.6).contains(&fmin) && (6.0..6.1).contains(&fmax), "{fmin} {fmax}");
        assert_relative_eq!(se[0], emin, max_relative = 1e-12);
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let f = e_layer();
        assert_eq!(f.sample(7).unwrap(), f.sample(7).unwrap());
        assert_ne!(f.sample(7).unwrap(), f.sample(8).unwrap());
    }

    #[test]
    fn sample_mean_converges() {
        let f = build_precision(3, 2, 0.082, -0.0205, 110.0).unwrap();
        let s = f.sampler().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 20_000;
        let mut acc = DVector::zeros(6);
        for _ in 0..n {
            acc += s.draw(&mut rng);
        }
        acc /= n as f64;
        let (_, var) = dense_marginals(&f.q.to_dense(), &f.eta).unwrap();
        for i in 0..6 {
            let se = (var[i] / n as f64).sqrt();
            assert!((acc[i] - 110.0).abs() < 4.0 * se, "node {i}: {}", acc[i]);
        }
    }
}
