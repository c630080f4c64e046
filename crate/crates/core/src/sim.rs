//! Synthetic scenario generation.
//!
//! All randomness comes from named streams derived from one run seed, so a
//! given (config, seed) pair always yields the same ground truth.

use log::debug;
use nalgebra::{DVector, Matrix3, Matrix4, Vector3, Vector4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::Serialize;

use crate::association::{ClutterModel, Origin};
use crate::config::{IonosondeKind, ScenarioConfig};
use crate::ecm::{EcmConfig, Scan, Tracker};
use crate::error::{Error, Result};
use crate::estimation::{ConstantVelocity, Dynamics, FilterState};
use crate::geometry::{slant_vector, Grid, Layer, MeasurementModel, PropagationMode, RadarGeometry};
use crate::gmrf::{build_precision, combine, GmrfField, JointField, Sampler};
use crate::ionosonde::{delay_variance_for_height_std, simulate_soundings, IonosondeSite, SiteKind};
use crate::vih::used_nodes;

/// Independent random streams of one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Targets,
    Fields,
    Detections,
    Clutter,
    Ionosondes,
}

/// Generator for `stream` under `seed` (SplitMix64 finalizer over the pair).
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let tag = stream as u64 + 1;
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Axis-aligned clutter region in measurement space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClutterBox {
    pub slant_range: [f64; 2],
    pub range_rate: [f64; 2],
    pub azimuth: [f64; 2],
}

impl ClutterBox {
    pub fn volume(&self) -> f64 {
        (self.slant_range[1] - self.slant_range[0])
            * (self.range_rate[1] - self.range_rate[0])
            * (self.azimuth[1] - self.azimuth[0])
    }

    pub fn contains(&self, y: &Vector3<f64>) -> bool {
        (self.slant_range[0]..=self.slant_range[1]).contains(&y[0])
            && (self.range_rate[0]..=self.range_rate[1]).contains(&y[1])
            && (self.azimuth[0]..=self.azimuth[1]).contains(&y[2])
    }
}

/// Simulation outputs for one run. Scans are numbered from 1; `states[l][0]`
/// is the initial state.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub targets: Vec<usize>,
    pub states: Vec<Vec<Vector4<f64>>>,
    /// True joint height field per scan (index `k - 1`).
    pub fields: Vec<DVector<f64>>,
    /// True reflection cells per target and scan (index `k - 1`).
    pub cells: Vec<Vec<Option<(usize, usize)>>>,
    pub scans: Vec<Scan>,
}

impl GroundTruth {
    /// True used heights of target slot `l` at scan `k`.
    pub fn used_heights(&self, l: usize, k: usize, nodes_per_layer: usize) -> Option<[f64; 4]> {
        self.cells[l][k - 1].map(|c| used_nodes(c, nodes_per_layer).map(|n| self.fields[k - 1][n]))
    }
}

/// JSON-friendly view of a [`GroundTruth`].
#[derive(Clone, Debug, Serialize)]
pub struct TruthExport {
    /// One-based target numbers.
    pub targets: Vec<usize>,
    pub states: Vec<Vec<[f64; 4]>>,
    pub fields: Vec<Vec<f64>>,
    pub scans: Vec<ScanExport>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScanExport {
    pub index: usize,
    pub radar: Vec<[f64; 3]>,
    pub labels: Vec<Origin>,
    pub soundings: Vec<SoundingExport>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SoundingExport {
    pub layer: Layer,
    /// One-based cell number.
    pub subregion: usize,
    pub delay_s: f64,
}

impl From<&GroundTruth> for TruthExport {
    fn from(t: &GroundTruth) -> Self {
        Self {
            targets: t.targets.iter().map(|i| i + 1).collect(),
            states: t.states.iter().map(|s| s.iter().map(|x| (*x).into()).collect()).collect(),
            fields: t.fields.iter().map(|f| f.as_slice().to_vec()).collect(),
            scans: t
                .scans
                .iter()
                .map(|s| ScanExport {
                    index: s.index,
                    radar: s.radar.iter().map(|y| (*y).into()).collect(),
                    labels: s.labels.clone(),
                    soundings: s
                        .soundings
                        .iter()
                        .map(|m| SoundingExport {
                            layer: m.site.layer,
                            subregion: m.site.subregion + 1,
                            delay_s: m.z,
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

/// A configured scenario with every model built once.
pub struct Scenario {
    pub config: ScenarioConfig,
    pub geometry: RadarGeometry,
    pub dynamics: ConstantVelocity,
    pub e_layer: GmrfField,
    pub f_layer: GmrfField,
    pub field: JointField,
    pub r: [Matrix3<f64>; 4],
    pub p_d: [f64; 4],
    pub clutter_box: ClutterBox,
    pub clutter: ClutterModel,
    pub sites: Vec<IonosondeSite>,
    e_sampler: Sampler,
    f_sampler: Sampler,
}

impl Scenario {
    pub fn new(config: ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let g = &config.grid;
        let grid = Grid::covering(g.x_km, g.y_km, g.cell_km)?;
        let geometry = RadarGeometry::new(config.baseline_km, grid)?;
        let dynamics = ConstantVelocity {
            dt: config.dt,
            noise_std: config.process.noise_std,
        };
        let le = &config.gmrf.e;
        let lf = &config.gmrf.f;
        let e_layer = build_precision(grid.nx, grid.ny, le.diagonal, le.off_diagonal, le.mean_km)?;
        let f_layer = build_precision(grid.nx, grid.ny, lf.diagonal, lf.off_diagonal, lf.mean_km)?;
        let field = combine(&e_layer, &f_layer)?;
        let sd = config.radar.noise_std;
        let r = [Matrix3::from_diagonal(&Vector3::new(sd[0] * sd[0], sd[1] * sd[1], sd[2] * sd[2])); 4];
        let p_d = [config.radar.detection_probability; 4];

        let mut sites = Vec::new();
        for s in &config.ionosondes {
            if s.subregion > grid.len() {
                return Err(Error::Config(format!(
                    "ionosonde subregion {} beyond the {}-cell grid",
                    s.subregion,
                    grid.len()
                )));
            }
            let kind = match s.kind {
                IonosondeKind::Vertical => SiteKind::Vertical,
                IonosondeKind::Oblique { distance_km } => SiteKind::Oblique(distance_km),
            };
            for layer in &s.layers {
                sites.push(IonosondeSite::new(
                    kind,
                    *layer,
                    s.subregion - 1,
                    delay_variance_for_height_std(s.noise_std_km),
                )?);
            }
        }

        let clutter_box = clutter_box(&config, &geometry)?;
        let volume = clutter_box.volume();
        let clutter = ClutterModel::new(config.radar.expected_clutter / volume, volume)?;
        let e_sampler = e_layer.sampler()?;
        let f_sampler = f_layer.sampler()?;
        Ok(Self {
            config,
            geometry,
            dynamics,
            e_layer,
            f_layer,
            field,
            r,
            p_d,
            clutter_box,
            clutter,
            sites,
            e_sampler,
            f_sampler,
        })
    }

    pub fn nodes_per_layer(&self) -> usize {
        self.field.nodes_per_layer
    }

    pub fn initial_state(&self, target: usize) -> Vector4<f64> {
        Vector4::from(self.config.targets[target].initial)
    }

    /// Tracker-side initial estimate: configured mean with the configured spread.
    pub fn initial_estimate(&self, target: usize) -> FilterState {
        let s = self.config.process.initial_std;
        FilterState::new(
            self.initial_state(target),
            Matrix4::from_diagonal(&Vector4::from(s.map(|v| v * v))),
        )
    }

    pub fn tracker(&self, cfg: EcmConfig) -> Result<Tracker<'_>> {
        Tracker::new(&self.geometry, &self.dynamics, self.r, self.p_d, self.clutter, &self.field, cfg)
    }

    /// Trajectories `x_0 ..= x_K` for the selected targets.
    pub fn generate_targets<R: Rng + ?Sized>(&self, targets: &[usize], rng: &mut R) -> Vec<Vec<Vector4<f64>>> {
        let sd = self.config.process.noise_std;
        targets
            .iter()
            .map(|&t| {
                let mut x = self.initial_state(t);
                let mut seq = vec![x];
                for _ in 0..self.config.scans {
                    let noise = Vector4::from_fn(|i, _| sd[i] * rng.sample::<f64, _>(StandardNormal));
                    x = self.dynamics.propagate(&x) + noise;
                    seq.push(x);
                }
                seq
            })
            .collect()
    }

    /// Independent joint height field per scan.
    pub fn sample_fields<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<DVector<f64>> {
        (0..self.config.scans)
            .map(|_| {
                let e = self.e_sampler.draw(rng);
                let f = self.f_sampler.draw(rng);
                DVector::from_iterator(e.len() + f.len(), e.iter().chain(f.iter()).copied())
            })
            .collect()
    }

    /// Target returns for one scan: one Bernoulli trial per (target, mode),
    /// evaluated at the true heights of the true reflection cells.
    pub fn detect<R: Rng + ?Sized>(
        &self,
        states: &[Vector4<f64>],
        ids: &[usize],
        field: &DVector<f64>,
        rng: &mut R,
    ) -> (Vec<Vector3<f64>>, Vec<Origin>) {
        let noise = [0, 1, 2].map(|i| Normal::new(0.0, self.r[0][(i, i)].sqrt()).expect("positive std"));
        let mut ys = Vec::new();
        let mut labels = Vec::new();
        for (x, &id) in states.iter().zip(ids) {
            let cells = match self.geometry.subregions(x) {
                Ok(c) => c,
                Err(e) => {
                    debug!("target {id}: no returns this scan ({e})");
                    continue;
                }
            };
            let beta = used_nodes(cells, self.nodes_per_layer()).map(|n| field[n]);
            for mode in PropagationMode::ALL {
                if !rng.random_bool(self.p_d[mode.index()]) {
                    continue;
                }
                let (t, r) = mode.used_vih_slots();
                match slant_vector(x, beta[t], beta[r], self.geometry.baseline) {
                    Ok(u) => {
                        let v = Vector3::from_fn(|i, _| noise[i].sample(rng));
                        ys.push(u + v);
                        labels.push(Origin::Target { target: id, mode });
                    }
                    Err(e) => debug!("target {id} mode {mode:?}: {e}"),
                }
            }
        }
        (ys, labels)
    }

    /// Poisson number of clutter returns, uniform over the clutter box.
    pub fn clutter_returns<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Vector3<f64>> {
        let mean = self.config.radar.expected_clutter;
        let n = if mean > 0.0 {
            Poisson::new(mean).expect("positive mean").sample(rng) as usize
        } else {
            0
        };
        let b = &self.clutter_box;
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(b.slant_range[0]..b.slant_range[1]),
                    rng.random_range(b.range_rate[0]..b.range_rate[1]),
                    rng.random_range(b.azimuth[0]..b.azimuth[1]),
                )
            })
            .collect()
    }

    /// Full run for the selected target ids.
    pub fn simulate(&self, seed: u64, targets: &[usize]) -> Result<GroundTruth> {
        if let Some(&bad) = targets.iter().find(|&&t| t >= self.config.targets.len()) {
            return Err(Error::Invalid(format!("no target {bad} in the scenario")));
        }
        let mut rng_t = stream_rng(seed, Stream::Targets);
        let mut rng_f = stream_rng(seed, Stream::Fields);
        let mut rng_d = stream_rng(seed, Stream::Detections);
        let mut rng_c = stream_rng(seed, Stream::Clutter);
        let mut rng_i = stream_rng(seed, Stream::Ionosondes);

        let states = self.generate_targets(targets, &mut rng_t);
        let fields = self.sample_fields(&mut rng_f);
        let cells: Vec<Vec<Option<(usize, usize)>>> = states
            .iter()
            .map(|seq| seq[1..].iter().map(|x| self.geometry.subregions(x).ok()).collect())
            .collect();

        let mut scans = Vec::with_capacity(self.config.scans);
        for k in 1..=self.config.scans {
            let xs: Vec<Vector4<f64>> = states.iter().map(|s| s[k]).collect();
            let (mut ys, mut labels) = self.detect(&xs, targets, &fields[k - 1], &mut rng_d);
            let clutter = self.clutter_returns(&mut rng_c);
            labels.extend(std::iter::repeat_n(Origin::Clutter, clutter.len()));
            ys.extend(clutter);
            let mut order: Vec<usize> = (0..ys.len()).collect();
            order.shuffle(&mut rng_d);
            let soundings =
                simulate_soundings(fields[k - 1].as_slice(), self.nodes_per_layer(), &self.sites, k, &mut rng_i)?;
            scans.push(Scan {
                index: k,
                radar: order.iter().map(|&i| ys[i]).collect(),
                labels: order.iter().map(|&i| labels[i]).collect(),
                soundings,
            });
        }
        Ok(GroundTruth {
            targets: targets.to_vec(),
            states,
            fields,
            cells,
            scans,
        })
    }
}

/// Measurement-space box spanned by the surveillance region under the
/// prior-mean heights of every mode.
pub fn clutter_box(config: &ScenarioConfig, geometry: &RadarGeometry) -> Result<ClutterBox> {
    let s = &config.surveillance;
    let (he, hf) = (config.gmrf.e.mean_km, config.gmrf.f.mean_km);
    let heights = [(he, he), (he, hf), (hf, he), (hf, hf)];
    let mut rg = [f64::INFINITY, f64::NEG_INFINITY];
    let mut az = [f64::INFINITY, f64::NEG_INFINITY];
    let steps = 64;
    for i in 0..=steps {
        let b = (s.azimuth_deg[0] + (s.azimuth_deg[1] - s.azimuth_deg[0]) * i as f64 / steps as f64).to_radians();
        for rho in [s.range_km[0], s.range_km[1]] {
            for (ht, hr) in heights {
                let u = slant_vector(&Vector4::new(rho, 0.0, b, 0.0), ht, hr, geometry.baseline)?;
                rg = [rg[0].min(u[0]), rg[1].max(u[0])];
                az = [az[0].min(u[2]), az[1].max(u[2])];
            }
        }
    }
    Ok(ClutterBox {
        slant_range: rg,
        range_rate: s.range_rate_kms,
        azimuth: az,
    })
}
