//! Linear equation of state and the a-priori physical-consistency metrics.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dims, GridGeometry, OceanState};
use crate::scalar::Real;

/// Linear equation of state `rho = rho0 (1 - alpha_T (T - T_ref) + beta_S (S - S_ref))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EosParams {
    pub rho0: f64,
    #[serde(rename = "alpha_T")]
    pub alpha_t: f64,
    #[serde(rename = "beta_S")]
    pub beta_s: f64,
    #[serde(rename = "T_ref")]
    pub t_ref: f64,
    #[serde(rename = "S_ref")]
    pub s_ref: f64,
}

impl Default for EosParams {
    fn default() -> Self {
        EosParams {
            rho0: 1026.0,
            alpha_t: 2e-4,
            beta_s: 7.6e-4,
            t_ref: 10.0,
            s_ref: 35.0,
        }
    }
}

impl EosParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("rho0", self.rho0),
            ("alpha_T", self.alpha_t),
            ("beta_S", self.beta_s),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(name, "must be finite and > 0"));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn rho(&self, t: f64, s: f64) -> f64 {
        self.rho0 * (1.0 - self.alpha_t * (t - self.t_ref) + self.beta_s * (s - self.s_ref))
    }
}

/// Potential density of every cell, in the state's canonical order.
pub fn density<R: Real>(state: &OceanState<R>, eos: &EosParams) -> Result<Vec<R>> {
    if state.normalized {
        return Err(Error::Validation(
            "density requires an unnormalized state".into(),
        ));
    }
    Ok(state
        .temperature
        .iter()
        .zip(&state.salinity)
        .map(|(t, s)| R::of(eos.rho(t.f64(), s.f64())))
        .collect())
}

/// Whether the cell at `(k, i, j)` sits above lighter water (strict inequality).
#[inline]
fn unstable<R: Real>(rho: &[R], dims: Dims, k: usize, i: usize, j: usize) -> bool {
    k + 1 < dims.z && rho[dims.idx(k + 1, i, j)] < rho[dims.idx(k, i, j)]
}

/// Number of cells flagged as statically unstable.
pub fn unstable_cell_count<R: Real>(rho: &[R], dims: Dims) -> usize {
    let mut n = 0;
    for k in 0..dims.z.saturating_sub(1) {
        for i in 0..dims.w {
            for j in 0..dims.h {
                n += unstable(rho, dims, k, i, j) as usize;
            }
        }
    }
    n
}

/// Percentage of the total volume whose cell lies above lighter water.
///
/// The deepest level has no neighbour below and is never flagged, but its
/// volume still counts in the denominator. Exact ties are stable.
pub fn density_error<R: Real>(rho: &[R], geometry: &GridGeometry) -> Result<f64> {
    let dims = geometry.dims;
    if rho.len() != dims.len() {
        return Err(Error::Validation(format!(
            "density field has {} cells, geometry {}",
            rho.len(),
            dims.len()
        )));
    }
    let mut flagged = 0.0;
    for k in 0..dims.z - 1 {
        for i in 0..dims.w {
            for j in 0..dims.h {
                if unstable(rho, dims, k, i, j) {
                    flagged += geometry.volume(k, i, j);
                }
            }
        }
    }
    let total: f64 = geometry.cell_volume.iter().sum();
    Ok(100.0 * flagged / total)
}

/// An inclusive index box over which water-mass properties are averaged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaterMassBox {
    pub name: String,
    pub k_range: [usize; 2],
    pub j_range: [usize; 2],
    pub i_range: [usize; 2],
}

impl WaterMassBox {
    pub fn validate(&self, dims: Dims) -> Result<()> {
        let within = |r: [usize; 2], n: usize| r[0] <= r[1] && r[1] < n;
        if !within(self.k_range, dims.z) || !within(self.i_range, dims.w) || !within(self.j_range, dims.h) {
            return Err(Error::config(
                format!("boxes.{}", self.name),
                format!("ranges must satisfy lo <= hi < dim for grid {dims}"),
            ));
        }
        Ok(())
    }
}

/// The two boxes reported in the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxConfig {
    pub bottom_water: WaterMassBox,
    pub deep_water: WaterMassBox,
}

impl BoxConfig {
    /// Bottom water: deepest quarter of the levels under the southernmost fifth
    /// of the latitudes. Deep water: levels at 40-75% of the column under the
    /// northernmost quarter. Both span all longitudes.
    pub fn default_for(dims: Dims) -> Self {
        let frac = |f: f64, n: usize| ((f * n as f64).ceil() as usize).min(n);
        let bottom_lo = frac(0.75, dims.z).min(dims.z - 1);
        let deep_lo = frac(0.4, dims.z).min(bottom_lo.saturating_sub(1));
        let deep_hi = bottom_lo.saturating_sub(1).max(deep_lo);
        let south_hi = frac(0.2, dims.h).max(1) - 1;
        let north_lo = dims.h - frac(0.25, dims.h).max(1);
        BoxConfig {
            bottom_water: WaterMassBox {
                name: "bottom_water".into(),
                k_range: [bottom_lo, dims.z - 1],
                j_range: [0, south_hi],
                i_range: [0, dims.w - 1],
            },
            deep_water: WaterMassBox {
                name: "deep_water".into(),
                k_range: [deep_lo, deep_hi],
                j_range: [north_lo, dims.h - 1],
                i_range: [0, dims.w - 1],
            },
        }
    }

    pub fn validate(&self, dims: Dims) -> Result<()> {
        self.bottom_water.validate(dims)?;
        self.deep_water.validate(dims)
    }
}

/// Volume-weighted mean temperature and salinity over a box.
pub fn water_mass_stats<R: Real>(
    state: &OceanState<R>,
    wm_box: &WaterMassBox,
    geometry: &GridGeometry,
) -> Result<(f64, f64)> {
    if state.normalized {
        return Err(Error::Validation(
            "water-mass statistics need an unnormalized state".into(),
        ));
    }
    let dims = state.dims;
    if dims != geometry.dims {
        return Err(Error::Validation("state and geometry dims differ".into()));
    }
    if wm_box.k_range[0] > wm_box.k_range[1]
        || wm_box.i_range[0] > wm_box.i_range[1]
        || wm_box.j_range[0] > wm_box.j_range[1]
    {
        return Err(Error::Validation(format!("box `{}` is empty", wm_box.name)));
    }
    wm_box.validate(dims)?;
    let (mut vol, mut t, mut s) = (0.0, 0.0, 0.0);
    for k in wm_box.k_range[0]..=wm_box.k_range[1] {
        for i in wm_box.i_range[0]..=wm_box.i_range[1] {
            for j in wm_box.j_range[0]..=wm_box.j_range[1] {
                let p = dims.idx(k, i, j);
                let v = geometry.cell_volume[p];
                vol += v;
                t += v * state.temperature[p].f64();
                s += v * state.salinity[p].f64();
            }
        }
    }
    Ok((t / vol, s / vol))
}

/// Mean over longitude: `section[k * H + j]`.
pub fn zonal_mean_density<R: Real>(rho: &[R], dims: Dims) -> Result<Vec<R>> {
    if rho.len() != dims.len() || dims.w == 0 {
        return Err(Error::Validation("density field does not match dims".into()));
    }
    let mut section = vec![R::zero(); dims.z * dims.h];
    let inv = R::one() / R::of(dims.w as f64);
    for k in 0..dims.z {
        for j in 0..dims.h {
            let sum: R = (0..dims.w).map(|i| rho[dims.idx(k, i, j)]).sum();
            section[k * dims.h + j] = sum * inv;
        }
    }
    Ok(section)
}

fn population_variance(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    v.map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

/// Spatial population variance of the surface level, `(var_T, var_S)` per state.
pub fn surface_variance<R: Real>(states: &[OceanState<R>]) -> Result<Vec<(f64, f64)>> {
    if states.is_empty() {
        return Err(Error::Validation("surface variance needs at least one state".into()));
    }
    states
        .iter()
        .map(|st| {
            if st.normalized {
                return Err(Error::Validation(
                    "surface variance needs unnormalized states".into(),
                ));
            }
            Ok((
                population_variance(st.t_level(0).iter().map(|v| v.f64())),
                population_variance(st.s_level(0).iter().map(|v| v.f64())),
            ))
        })
        .collect()
}

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub state_path: String,
    pub density_error_pct: f64,
    #[serde(rename = "bw_mean_T")]
    pub bw_mean_t: f64,
    #[serde(rename = "bw_mean_S")]
    pub bw_mean_s: f64,
    #[serde(rename = "dw_mean_T")]
    pub dw_mean_t: f64,
    #[serde(rename = "dw_mean_S")]
    pub dw_mean_s: f64,
    #[serde(rename = "surf_var_T")]
    pub surf_var_t: f64,
    #[serde(rename = "surf_var_S")]
    pub surf_var_s: f64,
}

pub const METRICS_HEADER: &str =
    "state_path,density_error_pct,bw_mean_T,bw_mean_S,dw_mean_T,dw_mean_S,surf_var_T,surf_var_S";

pub fn evaluate<R: Real>(
    state: &OceanState<R>,
    geometry: &GridGeometry,
    eos: &EosParams,
    boxes: &BoxConfig,
    state_path: &str,
) -> Result<MetricsReport> {
    let rho = density(&state.cast::<f64>(), eos)?;
    let density_error_pct = density_error(&rho, geometry)?;
    let (bw_mean_t, bw_mean_s) = water_mass_stats(state, &boxes.bottom_water, geometry)?;
    let (dw_mean_t, dw_mean_s) = water_mass_stats(state, &boxes.deep_water, geometry)?;
    let (surf_var_t, surf_var_s) = surface_variance(std::slice::from_ref(state))?[0];
    Ok(MetricsReport {
        state_path: state_path.to_string(),
        density_error_pct,
        bw_mean_t,
        bw_mean_s,
        dw_mean_t,
        dw_mean_s,
        surf_var_t,
        surf_var_s,
    })
}

pub fn write_metrics_csv<W: Write>(out: W, rows: &[MetricsReport]) -> Result<()> {
    write_csv(out, rows)
}

pub fn read_metrics_csv<Rd: Read>(input: Rd) -> Result<Vec<MetricsReport>> {
    read_csv(input)
}

pub(crate) fn write_csv<W: Write, T: Serialize>(out: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

pub(crate) fn read_csv<Rd: Read, T: serde::de::DeserializeOwned>(input: Rd) -> Result<Vec<T>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(csv_err))
        .collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::format("<csv>", e.to_string())
}

/// Mean and population standard deviation, reported as "mean ± σ".
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return MeanStd { mean: f64::NAN, std: f64::NAN };
        }
        let it = values.iter().copied();
        let mean = it.clone().sum::<f64>() / values.len() as f64;
        MeanStd {
            mean,
            std: population_variance(it).sqrt(),
        }
    }
}
