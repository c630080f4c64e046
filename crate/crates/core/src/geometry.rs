//! Coordinate registration for a bistatic skywave radar.
//!
//! Ground coordinates are (ground range, ground range rate, bearing, bearing
//! rate) about the receive site. Slant coordinates are (slant range, slant
//! range rate, azimuth). Each propagation leg reflects off a flat mirror at a
//! virtual height: the receive leg uses `h_r` and the transmit leg uses `h_t`.
//!
//! Local flat-earth frame: the receiver sits at the origin, `X = ρ cos b` runs
//! along boresight and `Y = ρ sin b` across it. The transmitter sits at
//! `(0, d)`, which is what makes the transmit-leg slant distance depend on
//! `ρ² − 2dρ sin b + d²`.

use nalgebra::{Matrix3x4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ground-coordinate kinematics of one target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetState {
    /// Ground range (km).
    pub rho: f64,
    /// Ground range rate (km/s).
    pub rho_dot: f64,
    /// Bearing (rad).
    pub bearing: f64,
    /// Bearing rate (rad/s).
    pub bearing_rate: f64,
}

impl TargetState {
    pub fn new(rho: f64, rho_dot: f64, bearing: f64, bearing_rate: f64) -> Self {
        Self {
            rho,
            rho_dot,
            bearing,
            bearing_rate,
        }
    }

    pub fn to_vector(&self) -> Vector4<f64> {
        Vector4::new(self.rho, self.rho_dot, self.bearing, self.bearing_rate)
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

/// One OTHR detection in slant coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadarMeasurement {
    /// Slant range (km).
    pub slant_range: f64,
    /// Slant range rate (km/s).
    pub range_rate: f64,
    /// Azimuth (rad).
    pub azimuth: f64,
}

impl RadarMeasurement {
    pub fn new(slant_range: f64, range_rate: f64, azimuth: f64) -> Self {
        Self {
            slant_range,
            range_rate,
            azimuth,
        }
    }

    pub fn to_vector(&self) -> Vector3<f64> {
        Vector3::new(self.slant_range, self.range_rate, self.azimuth)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v[0], v[1], v[2])
    }
}

/// Ionospheric layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Layer {
    E,
    F,
}

impl Layer {
    pub const BOTH: [Layer; 2] = [Layer::E, Layer::F];

    /// Offset of this layer's nodes in the joint (E then F) field.
    pub fn offset(self, nodes_per_layer: usize) -> usize {
        match self {
            Layer::E => 0,
            Layer::F => nodes_per_layer,
        }
    }
}

/// One-hop propagation mode, named (transmit-leg layer, receive-leg layer).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PropagationMode {
    EE,
    EF,
    FE,
    FF,
}

impl PropagationMode {
    pub const ALL: [PropagationMode; 4] = [
        PropagationMode::EE,
        PropagationMode::EF,
        PropagationMode::FE,
        PropagationMode::FF,
    ];

    /// Zero-based mode index (EE = 0 ... FF = 3).
    pub fn index(self) -> usize {
        match self {
            PropagationMode::EE => 0,
            PropagationMode::EF => 1,
            PropagationMode::FE => 2,
            PropagationMode::FF => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn transmit_layer(self) -> Layer {
        match self {
            PropagationMode::EE | PropagationMode::EF => Layer::E,
            PropagationMode::FE | PropagationMode::FF => Layer::F,
        }
    }

    pub fn receive_layer(self) -> Layer {
        match self {
            PropagationMode::EE | PropagationMode::FE => Layer::E,
            PropagationMode::EF | PropagationMode::FF => Layer::F,
        }
    }

    /// Positions of (h_t, h_r) inside the used-VIH vector
    /// `[hE(i_t), hE(i_r), hF(i_t), hF(i_r)]`.
    pub fn used_vih_slots(self) -> (usize, usize) {
        let t = match self.transmit_layer() {
            Layer::E => 0,
            Layer::F => 2,
        };
        let r = match self.receive_layer() {
            Layer::E => 1,
            Layer::F => 3,
        };
        (t, r)
    }
}

/// Rectangular lattice of ionospheric subregions, shared by both layers.
///
/// Cells are numbered X-fastest: `index = iy * nx + ix`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub x0: f64,
    pub y0: f64,
    pub cell: f64,
    pub nx: usize,
    pub ny: usize,
}

impl Grid {
    pub fn new(x0: f64, y0: f64, cell: f64, nx: usize, ny: usize) -> Result<Self> {
        if nx == 0 || ny == 0 || !(cell > 0.0) {
            return Err(Error::Invalid(format!(
                "grid needs positive cell counts and size, got {nx}x{ny} cells of {cell} km"
            )));
        }
        Ok(Self {
            x0,
            y0,
            cell,
            nx,
            ny,
        })
    }

    /// Build a grid covering `[x_min, x_max] × [y_min, y_max]` with square cells.
    pub fn covering(x: [f64; 2], y: [f64; 2], cell: f64) -> Result<Self> {
        let nx = ((x[1] - x[0]) / cell).round();
        let ny = ((y[1] - y[0]) / cell).round();
        if nx < 1.0 || ny < 1.0 {
            return Err(Error::Invalid(format!(
                "region {x:?} x {y:?} is smaller than one {cell} km cell"
            )));
        }
        Self::new(x[0], y[0], cell, nx as usize, ny as usize)
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cell containing the ground point `(x, y)`. Points on a shared cell
    /// boundary go to the lower-index cell.
    pub fn cell_of(&self, x: f64, y: f64) -> Result<usize> {
        let ix = axis_cell(x, self.x0, self.cell, self.nx);
        let iy = axis_cell(y, self.y0, self.cell, self.ny);
        match (ix, iy) {
            (Some(ix), Some(iy)) => Ok(iy * self.nx + ix),
            _ => Err(Error::OutOfCoverage { x, y }),
        }
    }

    /// Center of a cell in ground coordinates.
    pub fn center(&self, index: usize) -> (f64, f64) {
        let ix = index % self.nx;
        let iy = index / self.nx;
        (
            self.x0 + (ix as f64 + 0.5) * self.cell,
            self.y0 + (iy as f64 + 0.5) * self.cell,
        )
    }
}

fn axis_cell(v: f64, origin: f64, cell: f64, n: usize) -> Option<usize> {
    let t = (v - origin) / cell;
    if !t.is_finite() || t < 0.0 || t > n as f64 {
        return None;
    }
    let floor = t.floor();
    let idx = if floor == t && t > 0.0 {
        floor as usize - 1
    } else {
        floor as usize
    };
    Some(idx.min(n - 1))
}

/// Radar siting plus the ionosphere lattice used for coordinate registration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadarGeometry {
    /// Transmitter-to-receiver distance (km).
    pub baseline: f64,
    pub grid: Grid,
}

impl RadarGeometry {
    pub fn new(baseline: f64, grid: Grid) -> Result<Self> {
        if !(baseline >= 0.0) {
            return Err(Error::Invalid(format!(
                "baseline must be non-negative, got {baseline}"
            )));
        }
        Ok(Self { baseline, grid })
    }
}

struct Legs {
    r1: f64,
    r2: f64,
    sin_b: f64,
    cos_b: f64,
    s: f64,
}

fn legs(x: &Vector4<f64>, h_t: f64, h_r: f64, d: f64) -> Result<Legs> {
    let (rho, b) = (x[0], x[2]);
    if !(rho > 0.0) || !b.is_finite() {
        return Err(Error::Domain(format!(
            "ground range must be positive and bearing finite, got rho={rho}, b={b}"
        )));
    }
    if !(h_t > 0.0) || !(h_r > 0.0) {
        return Err(Error::Domain(format!(
            "virtual heights must be positive, got h_t={h_t}, h_r={h_r}"
        )));
    }
    let (sin_b, cos_b) = b.sin_cos();
    let half = rho / 2.0;
    let r1 = (half * half + h_r * h_r).sqrt();
    let r2 = (half * half - d * rho * sin_b / 2.0 + d * d / 4.0 + h_t * h_t).sqrt();
    let s = rho * sin_b / (2.0 * r1);
    if !(-1.0..=1.0).contains(&s) {
        return Err(Error::Domain(format!("azimuth sine {s} outside [-1, 1]")));
    }
    Ok(Legs {
        r1,
        r2,
        sin_b,
        cos_b,
        s,
    })
}

/// Ground-to-slant transform for one propagation path.
pub fn slant_transform(
    state: &TargetState,
    h_t: f64,
    h_r: f64,
    geom: &RadarGeometry,
) -> Result<RadarMeasurement> {
    slant_vector(&state.to_vector(), h_t, h_r, geom.baseline).map(|v| RadarMeasurement::from_vector(&v))
}

pub(crate) fn slant_vector(x: &Vector4<f64>, h_t: f64, h_r: f64, d: f64) -> Result<Vector3<f64>> {
    let l = legs(x, h_t, h_r, d)?;
    let rho = x[0];
    let slant_range = l.r1 + l.r2;
    let range_rate = x[1] / 4.0 * (rho / l.r1 + (rho - d * l.sin_b) / l.r2);
    Ok(Vector3::new(slant_range, range_rate, l.s.asin()))
}

/// ∂(r_g, r_r, a_z)/∂(ρ, ρ̇, b, ḃ).
pub fn jacobian_state(
    state: &TargetState,
    h_t: f64,
    h_r: f64,
    geom: &RadarGeometry,
) -> Result<Matrix3x4<f64>> {
    state_jacobian_vector(&state.to_vector(), h_t, h_r, geom.baseline)
}

pub(crate) fn state_jacobian_vector(
    x: &Vector4<f64>,
    h_t: f64,
    h_r: f64,
    d: f64,
) -> Result<Matrix3x4<f64>> {
    let l = legs(x, h_t, h_r, d)?;
    let (rho, rho_dot) = (x[0], x[1]);
    let (r1, r2) = (l.r1, l.r2);

    let r1_rho = rho / (4.0 * r1);
    let near = rho - d * l.sin_b;
    let r2_rho = near / (4.0 * r2);
    let r2_b = -d * rho * l.cos_b / (4.0 * r2);

    let a = rho / r1;
    let b = near / r2;
    let a_rho = 1.0 / r1 - rho * r1_rho / (r1 * r1);
    let b_rho = 1.0 / r2 - near * r2_rho / (r2 * r2);
    let b_b = -d * l.cos_b / r2 - near * r2_b / (r2 * r2);

    let cos_az = (1.0 - l.s * l.s).sqrt();
    if cos_az == 0.0 {
        return Err(Error::Domain("azimuth at ±90°, derivative undefined".into()));
    }
    let s_rho = l.sin_b / (2.0 * r1) - rho * l.sin_b * r1_rho / (2.0 * r1 * r1);
    let s_b = rho * l.cos_b / (2.0 * r1);

    #[rustfmt::skip]
    let j = Matrix3x4::new(
        r1_rho + r2_rho,              0.0,           r2_b,                 0.0,
        rho_dot / 4.0 * (a_rho + b_rho), (a + b) / 4.0, rho_dot / 4.0 * b_b, 0.0,
        s_rho / cos_az,               0.0,           s_b / cos_az,         0.0,
    );
    Ok(j)
}

/// Height sensitivities `(∂u/∂h_t, ∂u/∂h_r)`.
pub fn jacobian_heights(
    state: &TargetState,
    h_t: f64,
    h_r: f64,
    geom: &RadarGeometry,
) -> Result<(Vector3<f64>, Vector3<f64>)> {
    height_jacobian_vector(&state.to_vector(), h_t, h_r, geom.baseline)
}

pub(crate) fn height_jacobian_vector(
    x: &Vector4<f64>,
    h_t: f64,
    h_r: f64,
    d: f64,
) -> Result<(Vector3<f64>, Vector3<f64>)> {
    let l = legs(x, h_t, h_r, d)?;
    let (rho, rho_dot) = (x[0], x[1]);
    let (r1, r2) = (l.r1, l.r2);
    let near = rho - d * l.sin_b;
    let cos_az = (1.0 - l.s * l.s).sqrt();

    let dt = Vector3::new(h_t / r2, -rho_dot / 4.0 * near * h_t / r2.powi(3), 0.0);
    let dr = Vector3::new(
        h_r / r1,
        -rho_dot / 4.0 * rho * h_r / r1.powi(3),
        -rho * l.sin_b * h_r / (2.0 * r1.powi(3)) / cos_az,
    );
    Ok((dt, dr))
}

/// Ground points (km) where the transmit leg and the receive leg reflect:
/// the midpoints of the transmitter→target and target→receiver segments.
pub fn reflection_points(x: &Vector4<f64>, baseline: f64) -> ((f64, f64), (f64, f64)) {
    let (rho, b) = (x[0], x[2]);
    let (sin_b, cos_b) = b.sin_cos();
    let gx = rho * cos_b;
    let gy = rho * sin_b;
    ((gx / 2.0, (gy + baseline) / 2.0), (gx / 2.0, gy / 2.0))
}

/// Lattice cells `(i_t, i_r)` of the transmit- and receive-leg reflection
/// points. Both layers share the lattice, so the propagation mode only
/// selects which layer each index refers to.
pub fn reflection_subregions(state: &TargetState, geom: &RadarGeometry) -> Result<(usize, usize)> {
    subregions_vector(&state.to_vector(), geom)
}

pub(crate) fn subregions_vector(x: &Vector4<f64>, geom: &RadarGeometry) -> Result<(usize, usize)> {
    if !(x[0] > 0.0) || !x[2].is_finite() {
        return Err(Error::Domain(format!(
            "ground range must be positive and bearing finite, got rho={}, b={}",
            x[0], x[2]
        )));
    }
    let (pt, pr) = reflection_points(x, geom.baseline);
    Ok((geom.grid.cell_of(pt.0, pt.1)?, geom.grid.cell_of(pr.0, pr.1)?))
}

/// Measurement model seen by the tracker: the slant transform for a pair of
/// leg heights, its derivatives, and the reflection-cell lookup.
///
/// [`RadarGeometry`] is the production implementation; tests substitute exact
/// linear models.
pub trait MeasurementModel: Sync {
    fn measure(&self, x: &Vector4<f64>, h_t: f64, h_r: f64) -> Result<Vector3<f64>>;

    fn state_jacobian(&self, x: &Vector4<f64>, h_t: f64, h_r: f64) -> Result<Matrix3x4<f64>>;

    fn height_jacobian(
        &self,
        x: &Vector4<f64>,
        h_t: f64,
        h_r: f64,
    ) -> Result<(Vector3<f64>, Vector3<f64>)>;

    /// `(i_t, i_r)` cell indices within one layer.
    fn subregions(&self, x: &Vector4<f64>) -> Result<(usize, usize)>;

    /// Cells per layer.
    fn nodes_per_layer(&self) -> usize;
}

impl MeasurementModel for RadarGeometry {
    fn measure(&self, x: &Vector4<f64>, h_t: f64, h_r: f64) -> Result<Vector3<f64>> {
        slant_vector(x, h_t, h_r, self.baseline)
    }

    fn state_jacobian(&self, x: &Vector4<f64>, h_t: f64, h_r: f64) -> Result<Matrix3x4<f64>> {
        state_jacobian_vector(x, h_t, h_r, self.baseline)
    }

    fn height_jacobian(
        &self,
        x: &Vector4<f64>,
        h_t: f64,
        h_r: f64,
    ) -> Result<(Vector3<f64>, Vector3<f64>)> {
        height_jacobian_vector(x, h_t, h_r, self.baseline)
    }

    fn subregions(&self, x: &Vector4<f64>) -> Result<(usize, usize)> {
        subregions_vector(x, self)
    }

    fn nodes_per_layer(&self) -> usize {
        self.grid.len()
    }
}
