//! Ionosonde delay models and their canonical-form contributions.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Layer;

/// Speed of light (km/s).
pub const LIGHT_SPEED: f64 = 299_792.458;

/// Two-way vertical sounding delay (s) for a reflection at `h` km.
pub fn g_vertical(h: f64) -> f64 {
    2.0 * h / LIGHT_SPEED
}

/// Oblique sounding delay (s) over a ground path of `d` km, flat mirror at `h`.
pub fn g_oblique(h: f64, d: f64) -> f64 {
    2.0 * (h * h + d * d / 4.0).sqrt() / LIGHT_SPEED
}

/// Delay variance (s²) equivalent to a height error of `std_km`.
pub fn delay_variance_for_height_std(std_km: f64) -> f64 {
    g_vertical(std_km).powi(2)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SiteKind {
    Vertical,
    /// Transmitter-receiver ground separation in km.
    Oblique(f64),
}

impl SiteKind {
    pub fn delay(self, h: f64) -> f64 {
        match self {
            SiteKind::Vertical => g_vertical(h),
            SiteKind::Oblique(d) => g_oblique(h, d),
        }
    }

    pub fn delay_derivative(self, h: f64) -> f64 {
        match self {
            SiteKind::Vertical => 2.0 / LIGHT_SPEED,
            SiteKind::Oblique(d) => 2.0 * h / ((h * h + d * d / 4.0).sqrt() * LIGHT_SPEED),
        }
    }
}

/// One sounder observing one layer above one lattice cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IonosondeSite {
    pub kind: SiteKind,
    pub layer: Layer,
    /// Zero-based cell index within the layer.
    pub subregion: usize,
    /// Delay noise variance (s²).
    pub noise_var: f64,
}

impl IonosondeSite {
    pub fn new(kind: SiteKind, layer: Layer, subregion: usize, noise_var: f64) -> Result<Self> {
        if !(noise_var >= 0.0) {
            return Err(Error::Invalid(format!("ionosonde noise variance {noise_var}")));
        }
        Ok(Self {
            kind,
            layer,
            subregion,
            noise_var,
        })
    }

    /// Index of the observed node in the joint E+F field.
    pub fn joint_node(&self, nodes_per_layer: usize) -> usize {
        self.layer.offset(nodes_per_layer) + self.subregion
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IonosondeMeasurement {
    pub site: IonosondeSite,
    /// Measured delay (s).
    pub z: f64,
    pub scan: usize,
}

/// Draw one sounding per site from the true joint height vector.
pub fn simulate_soundings<R: Rng + ?Sized>(
    truth: &[f64],
    nodes_per_layer: usize,
    sites: &[IonosondeSite],
    scan: usize,
    rng: &mut R,
) -> Result<Vec<IonosondeMeasurement>> {
    sites
        .iter()
        .map(|site| {
            let node = site.joint_node(nodes_per_layer);
            let h = *truth.get(node).ok_or_else(|| {
                Error::Invalid(format!("site cell {} outside the height field", site.subregion))
            })?;
            let noise = if site.noise_var > 0.0 {
                Normal::new(0.0, site.noise_var.sqrt())
                    .expect("positive std")
                    .sample(rng)
            } else {
                0.0
            };
            Ok(IonosondeMeasurement {
                site: *site,
                z: site.kind.delay(h) + noise,
                scan,
            })
        })
        .collect()
}

/// Canonical increment `(ΔQ, Δη)` from linearizing the delay model at `h0`.
pub fn canonical_update_iono(z: f64, site: &IonosondeSite, h0: f64) -> Result<(f64, f64)> {
    if !(site.noise_var > 0.0) {
        return Err(Error::Invalid(
            "canonical update needs a positive noise variance".into(),
        ));
    }
    let g = site.kind.delay(h0);
    let gp = site.kind.delay_derivative(h0);
    let dq = gp * gp / site.noise_var;
    let deta = gp * (gp * h0 - g + z) / site.noise_var;
    Ok((dq, deta))
}
