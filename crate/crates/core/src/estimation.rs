//! Target state estimation: stacked-mode filtering on equivalent measurements
//! and an unscented Rauch-Tung-Striebel smoother.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x4, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::association::Prediction;
use crate::error::{Error, Result};
use crate::geometry::{MeasurementModel, PropagationMode};

/// State transition `x_{k+1} = f(x_k) + ζ`, `ζ ~ N(0, B)`.
pub trait Dynamics: Sync {
    fn propagate(&self, x: &Vector4<f64>) -> Vector4<f64>;
    fn jacobian(&self, x: &Vector4<f64>) -> Matrix4<f64>;
    fn noise(&self) -> Matrix4<f64>;
}

/// Constant velocity in ground range and bearing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstantVelocity {
    pub dt: f64,
    /// Per-step process noise std for (ρ, ρ̇, b, ḃ).
    pub noise_std: [f64; 4],
}

impl ConstantVelocity {
    pub fn transition(&self) -> Matrix4<f64> {
        let mut f = Matrix4::identity();
        f[(0, 1)] = self.dt;
        f[(2, 3)] = self.dt;
        f
    }
}

impl Dynamics for ConstantVelocity {
    fn propagate(&self, x: &Vector4<f64>) -> Vector4<f64> {
        self.transition() * x
    }

    fn jacobian(&self, _x: &Vector4<f64>) -> Matrix4<f64> {
        self.transition()
    }

    fn noise(&self) -> Matrix4<f64> {
        Matrix4::from_diagonal(&Vector4::from(self.noise_std.map(|s| s * s)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterState {
    pub x: Vector4<f64>,
    pub p: Matrix4<f64>,
}

impl FilterState {
    pub fn new(x: Vector4<f64>, p: Matrix4<f64>) -> Self {
        Self { x, p }
    }
}

fn symmetrize<const N: usize>(m: &nalgebra::SMatrix<f64, N, N>) -> nalgebra::SMatrix<f64, N, N> {
    (m + m.transpose()) * 0.5
}

pub fn predict(prior: &FilterState, dynamics: &dyn Dynamics) -> FilterState {
    let f = dynamics.jacobian(&prior.x);
    FilterState {
        x: dynamics.propagate(&prior.x),
        p: symmetrize(&(f * prior.p * f.transpose() + dynamics.noise())),
    }
}

/// Heights `(h_t, h_r)` a mode uses out of `β = [hE(i_t), hE(i_r), hF(i_t), hF(i_r)]`.
pub fn mode_heights(beta: &[f64; 4], mode: PropagationMode) -> (f64, f64) {
    let (t, r) = mode.used_vih_slots();
    (beta[t], beta[r])
}

/// Per-mode predicted measurement and innovation covariance.
pub fn predict_measurement(
    pred: &FilterState,
    beta: &[f64; 4],
    model: &dyn MeasurementModel,
    r: &[Matrix3<f64>; 4],
) -> Result<[Prediction; 4]> {
    let mut out = [Prediction {
        y: Vector3::zeros(),
        s: Matrix3::zeros(),
    }; 4];
    for mode in PropagationMode::ALL {
        let (ht, hr) = mode_heights(beta, mode);
        let y = model.measure(&pred.x, ht, hr)?;
        let j = model.state_jacobian(&pred.x, ht, hr)?;
        let s = j * pred.p * j.transpose() + r[mode.index()];
        out[mode.index()] = Prediction { y, s: symmetrize(&s) };
    }
    Ok(out)
}

/// Association-weighted measurement for one (target, mode).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EquivalentMeasurement {
    pub mode: PropagationMode,
    pub y: Vector3<f64>,
    pub r: Matrix3<f64>,
    /// Total posterior mass of the events feeding this mode.
    pub weight: f64,
}

/// Collapse `(measurement, weight)` lists per mode into equivalent
/// measurements. Modes whose mass is at most `min_weight` are dropped.
pub fn synthesize_equivalent(
    per_mode: &[Vec<(usize, f64)>; 4],
    measurements: &[Vector3<f64>],
    r: &[Matrix3<f64>; 4],
    min_weight: f64,
) -> Vec<EquivalentMeasurement> {
    let mut out = Vec::new();
    for mode in PropagationMode::ALL {
        let list = &per_mode[mode.index()];
        let w: f64 = list.iter().map(|(_, w)| w).sum();
        if !(w > min_weight) {
            continue;
        }
        let y = list
            .iter()
            .fold(Vector3::zeros(), |acc, &(j, wj)| acc + measurements[j] * wj)
            / w;
        out.push(EquivalentMeasurement {
            mode,
            y,
            r: r[mode.index()] / w,
            weight: w,
        });
    }
    out
}

/// Stacked update over every present mode. An empty set returns `pred`.
pub fn update(
    pred: &FilterState,
    equivalents: &[EquivalentMeasurement],
    beta: &[f64; 4],
    model: &dyn MeasurementModel,
) -> Result<FilterState> {
    if equivalents.is_empty() {
        return Ok(*pred);
    }
    let m = 3 * equivalents.len();
    let mut h = DMatrix::zeros(m, 4);
    let mut nu = DVector::zeros(m);
    let mut rc = DMatrix::zeros(m, m);
    for (k, eq) in equivalents.iter().enumerate() {
        let (ht, hr) = mode_heights(beta, eq.mode);
        let j: Matrix3x4<f64> = model.state_jacobian(&pred.x, ht, hr)?;
        let u = model.measure(&pred.x, ht, hr)?;
        h.view_mut((3 * k, 0), (3, 4)).copy_from(&j);
        nu.rows_mut(3 * k, 3).copy_from(&(eq.y - u));
        rc.view_mut((3 * k, 3 * k), (3, 3)).copy_from(&eq.r);
    }
    let p = DMatrix::from_column_slice(4, 4, pred.p.as_slice());
    let s = &h * &p * h.transpose() + &rc;
    let s = (&s + s.transpose()) * 0.5;
    let chol = s
        .cholesky()
        .ok_or_else(|| Error::Singular("stacked innovation covariance".into()))?;
    // K = P Hᵀ S⁻¹
    let k = chol.solve(&(&h * &p)).transpose();
    let x = pred.x + Vector4::from_column_slice((&k * nu).as_slice());
    let a = DMatrix::<f64>::identity(4, 4) - &k * &h;
    let pj = &a * &p * a.transpose() + &k * &rc * k.transpose();
    let pj = Matrix4::from_column_slice(pj.as_slice());
    Ok(FilterState {
        x,
        p: symmetrize(&pj),
    })
}

/// Unscented smoother parameters: state dimension `sigma` and spread
/// `varsigma`. Points sit at `x ± √(σ+ς)` times columns of `√P`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnscentedParams {
    pub sigma: f64,
    pub varsigma: f64,
}

impl Default for UnscentedParams {
    fn default() -> Self {
        Self {
            sigma: 4.0,
            varsigma: -1.0,
        }
    }
}

impl UnscentedParams {
    pub fn weights(&self) -> (f64, f64) {
        let denom = self.sigma + self.varsigma;
        (self.varsigma / denom, 1.0 / (2.0 * denom))
    }
}

/// Lower Cholesky factor, retrying with growing diagonal jitter.
pub fn psd_sqrt(p: &Matrix4<f64>) -> Result<Matrix4<f64>> {
    let mut jitter = 0.0;
    for _ in 0..6 {
        let m = symmetrize(p) + Matrix4::identity() * jitter;
        if let Some(c) = m.cholesky() {
            return Ok(c.l());
        }
        jitter = if jitter == 0.0 { 1e-9 } else { jitter * 100.0 };
    }
    Err(Error::NotPositiveDefinite("state covariance for sigma points".into()))
}

fn sigma_points(x: &Vector4<f64>, p: &Matrix4<f64>, params: &UnscentedParams) -> Result<[Vector4<f64>; 9]> {
    let l = psd_sqrt(p)? * (params.sigma + params.varsigma).sqrt();
    let mut pts = [*x; 9];
    for i in 0..4 {
        let c = l.column(i);
        pts[1 + i] = x + c;
        pts[5 + i] = x - c;
    }
    Ok(pts)
}

/// Backward unscented RTS pass. The last entry is returned unchanged.
pub fn urts_smooth(
    filtered: &[FilterState],
    dynamics: &dyn Dynamics,
    params: &UnscentedParams,
) -> Result<Vec<FilterState>> {
    let Some(last) = filtered.last() else {
        return Err(Error::Invalid("empty filtered sequence".into()));
    };
    let (w0, wi) = params.weights();
    let weight = |i: usize| if i == 0 { w0 } else { wi };
    let b = dynamics.noise();
    let mut out = filtered.to_vec();
    let mut next = *last;
    for k in (0..filtered.len() - 1).rev() {
        let f = &filtered[k];
        let pts = sigma_points(&f.x, &f.p, params)?;
        let prop = pts.map(|p| dynamics.propagate(&p));
        let x_pred = (0..9).fold(Vector4::zeros(), |acc, i| acc + prop[i] * weight(i));
        let mut p_pred = b;
        let mut cross = Matrix4::zeros();
        for i in 0..9 {
            let dp = prop[i] - x_pred;
            p_pred += dp * dp.transpose() * weight(i);
            cross += (pts[i] - f.x) * dp.transpose() * weight(i);
        }
        let p_pred = symmetrize(&p_pred);
        let inv = p_pred
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("smoother predicted covariance".into()))?
            .inverse();
        let d = cross * inv;
        let xs = f.x + d * (next.x - x_pred);
        let ps = f.p + d * (next.p - p_pred) * d.transpose();
        next = FilterState {
            x: xs,
            p: symmetrize(&ps),
        };
        out[k] = next;
    }
    Ok(out)
}

/// Exactly linear measurement model `u = H x + a h_t + c h_r + o` with
/// fixed reflection cells. Useful for validating estimators where
/// linearization must be exact.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearMeasurement {
    pub h: Matrix3x4<f64>,
    pub dt: Vector3<f64>,
    pub dr: Vector3<f64>,
    pub offset: Vector3<f64>,
    pub cells: (usize, usize),
    pub nodes_per_layer: usize,
}

impl MeasurementModel for LinearMeasurement {
    fn measure(&self, x: &Vector4<f64>, h_t: f64, h_r: f64) -> Result<Vector3<f64>> {
        Ok(self.h * x + self.dt * h_t + self.dr * h_r + self.offset)
    }

    fn state_jacobian(&self, _x: &Vector4<f64>, _h_t: f64, _h_r: f64) -> Result<Matrix3x4<f64>> {
        Ok(self.h)
    }

    fn height_jacobian(&self, _x: &Vector4<f64>, _h_t: f64, _h_r: f64) -> Result<(Vector3<f64>, Vector3<f64>)> {
        Ok((self.dt, self.dr))
    }

    fn subregions(&self, _x: &Vector4<f64>) -> Result<(usize, usize)> {
        Ok(self.cells)
    }

    fn nodes_per_layer(&self) -> usize {
        self.nodes_per_layer
    }
}
