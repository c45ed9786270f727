//! State and grid data model plus per-level standardization.
//!
//! Arrays are stored level-major: `k` (depth, downward) outermost, then
//! longitude `i`, then latitude `j`, so flat index = `(k * W + i) * H + j`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Sanity bounds applied to unnormalized states.
pub const TEMPERATURE_BOUNDS: (f64, f64) = (-5.0, 45.0);
pub const SALINITY_BOUNDS: (f64, f64) = (0.0, 45.0);

/// Standard deviations below this are replaced by 1.0.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    /// Vertical levels, `k = 0` at the surface.
    pub z: usize,
    /// Longitude points.
    pub w: usize,
    /// Latitude points.
    pub h: usize,
}

impl Dims {
    pub fn new(z: usize, w: usize, h: usize) -> Self {
        Dims { z, w, h }
    }

    pub fn level_len(&self) -> usize {
        self.w * self.h
    }

    pub fn len(&self) -> usize {
        self.z * self.w * self.h
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, k: usize, i: usize, j: usize) -> usize {
        (k * self.w + i) * self.h + j
    }

    /// Requirements for a state or geometry grid.
    pub fn validate(&self) -> Result<()> {
        if self.z < 2 || self.w < 1 || self.h < 1 {
            return Err(Error::Validation(format!(
                "grid dims must satisfy Z >= 2, W >= 1, H >= 1 (got {}x{}x{})",
                self.z, self.w, self.h
            )));
        }
        Ok(())
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.z, self.w, self.h)
    }
}

/// Parameters of a regular latitude/longitude box with stretched levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryParams {
    pub max_depth_m: f64,
    /// Level interfaces sit at `max_depth * (k / Z)^stretch`.
    pub stretch: f64,
    pub lat_south_deg: f64,
    pub lat_north_deg: f64,
    pub lon_west_deg: f64,
    pub lon_east_deg: f64,
}

impl Default for GeometryParams {
    fn default() -> Self {
        GeometryParams {
            max_depth_m: 4000.0,
            stretch: 2.0,
            lat_south_deg: -70.0,
            lat_north_deg: 70.0,
            lon_west_deg: 0.0,
            lon_east_deg: 60.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridGeometry {
    pub dims: Dims,
    /// Cell-centre depths, strictly increasing with `k`.
    pub depth_m: Vec<f64>,
    /// Cell thicknesses.
    pub thickness_m: Vec<f64>,
    pub lat_deg: Vec<f64>,
    pub lon_deg: Vec<f64>,
    /// Per-cell volumes in canonical order.
    pub cell_volume: Vec<f64>,
}

const EARTH_RADIUS_M: f64 = 6.371e6;

impl GridGeometry {
    pub fn new(
        dims: Dims,
        depth_m: Vec<f64>,
        thickness_m: Vec<f64>,
        lat_deg: Vec<f64>,
        lon_deg: Vec<f64>,
        cell_volume: Vec<f64>,
    ) -> Result<Self> {
        dims.validate()?;
        let geom = GridGeometry {
            dims,
            depth_m,
            thickness_m,
            lat_deg,
            lon_deg,
            cell_volume,
        };
        geom.validate()?;
        Ok(geom)
    }

    fn validate(&self) -> Result<()> {
        let d = self.dims;
        if self.depth_m.len() != d.z
            || self.thickness_m.len() != d.z
            || self.lat_deg.len() != d.h
            || self.lon_deg.len() != d.w
            || self.cell_volume.len() != d.len()
        {
            return Err(Error::Validation(format!(
                "geometry arrays do not match dims {d}"
            )));
        }
        if self.depth_m.windows(2).any(|p| !(p[1] > p[0])) {
            return Err(Error::Validation(
                "depth_m must be strictly increasing".into(),
            ));
        }
        if self.thickness_m.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::Validation("thickness_m must be positive".into()));
        }
        if self.cell_volume.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Validation("cell volumes must be positive".into()));
        }
        Ok(())
    }

    /// Unit-volume grid with unit-thickness levels, handy for metric arithmetic.
    pub fn uniform(dims: Dims) -> Result<Self> {
        let lat = linspace(-70.0, 70.0, dims.h);
        let lon = linspace(0.0, 60.0, dims.w);
        Self::new(
            dims,
            (0..dims.z).map(|k| k as f64 + 0.5).collect(),
            vec![1.0; dims.z],
            lat,
            lon,
            vec![1.0; dims.len()],
        )
    }

    /// Regular lat/lon box; volumes are spherical cell areas times thickness.
    pub fn regular(dims: Dims, params: &GeometryParams) -> Result<Self> {
        dims.validate()?;
        if !(params.max_depth_m > 0.0) || !(params.stretch > 0.0) {
            return Err(Error::config("geometry", "max_depth_m and stretch must be > 0"));
        }
        if !(params.lat_north_deg > params.lat_south_deg)
            || !(params.lon_east_deg > params.lon_west_deg)
            || params.lat_south_deg < -90.0
            || params.lat_north_deg > 90.0
        {
            return Err(Error::config("geometry", "invalid lat/lon extent"));
        }
        let interfaces: Vec<f64> = (0..=dims.z)
            .map(|k| params.max_depth_m * (k as f64 / dims.z as f64).powf(params.stretch))
            .collect();
        let depth: Vec<f64> = interfaces.windows(2).map(|p| 0.5 * (p[0] + p[1])).collect();
        let thickness: Vec<f64> = interfaces.windows(2).map(|p| p[1] - p[0]).collect();

        let dlat = (params.lat_north_deg - params.lat_south_deg) / dims.h as f64;
        let dlon = (params.lon_east_deg - params.lon_west_deg) / dims.w as f64;
        let lat: Vec<f64> = (0..dims.h)
            .map(|j| params.lat_south_deg + (j as f64 + 0.5) * dlat)
            .collect();
        let lon: Vec<f64> = (0..dims.w)
            .map(|i| params.lon_west_deg + (i as f64 + 0.5) * dlon)
            .collect();

        let area: Vec<f64> = lat
            .iter()
            .map(|&phi| {
                let (s, n) = ((phi - 0.5 * dlat).to_radians(), (phi + 0.5 * dlat).to_radians());
                EARTH_RADIUS_M * EARTH_RADIUS_M * dlon.to_radians() * (n.sin() - s.sin())
            })
            .collect();
        let mut volume = vec![0.0; dims.len()];
        for k in 0..dims.z {
            for i in 0..dims.w {
                for j in 0..dims.h {
                    volume[dims.idx(k, i, j)] = area[j] * thickness[k];
                }
            }
        }
        Self::new(dims, depth, thickness, lat, lon, volume)
    }

    pub fn volume(&self, k: usize, i: usize, j: usize) -> f64 {
        self.cell_volume[self.dims.idx(k, i, j)]
    }
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (a + b)];
    }
    (0..n)
        .map(|t| a + (b - a) * t as f64 / (n - 1) as f64)
        .collect()
}

/// Temperature and salinity on a `Z x W x H` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct OceanState<R> {
    pub dims: Dims,
    /// Conservative temperature, degrees Celsius (or standardized units).
    pub temperature: Vec<R>,
    /// Absolute salinity, g/kg (or standardized units).
    pub salinity: Vec<R>,
    pub normalized: bool,
}

impl<R: Real> OceanState<R> {
    pub fn new(dims: Dims, temperature: Vec<R>, salinity: Vec<R>, normalized: bool) -> Result<Self> {
        let state = OceanState {
            dims,
            temperature,
            salinity,
            normalized,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn constant(dims: Dims, t: R, s: R) -> Result<Self> {
        Self::new(dims, vec![t; dims.len()], vec![s; dims.len()], false)
    }

    /// Checks shape, finiteness, and (for physical units) sanity bounds.
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        let n = self.dims.len();
        if self.temperature.len() != n || self.salinity.len() != n {
            return Err(Error::Validation(format!(
                "field lengths {} / {} do not match dims {}",
                self.temperature.len(),
                self.salinity.len(),
                self.dims
            )));
        }
        if let Some(p) = self
            .temperature
            .iter()
            .chain(&self.salinity)
            .position(|v| !v.is_finite())
        {
            return Err(Error::Validation(format!("non-finite value at flat index {p}")));
        }
        if !self.normalized {
            check_bounds("temperature", &self.temperature, TEMPERATURE_BOUNDS)?;
            check_bounds("salinity", &self.salinity, SALINITY_BOUNDS)?;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> OceanState<U> {
        OceanState {
            dims: self.dims,
            temperature: self.temperature.iter().map(|v| U::of(v.f64())).collect(),
            salinity: self.salinity.iter().map(|v| U::of(v.f64())).collect(),
            normalized: self.normalized,
        }
    }

    /// The concatenated `[2Z][W][H]` tensor, temperature channels first.
    pub fn to_tensor(&self) -> Tensor<R> {
        let mut data = Vec::with_capacity(2 * self.dims.len());
        data.extend_from_slice(&self.temperature);
        data.extend_from_slice(&self.salinity);
        Tensor::from_vec(2 * self.dims.z, self.dims.w, self.dims.h, data)
    }

    pub fn from_tensor(x: &Tensor<R>, normalized: bool) -> Result<Self> {
        if x.c % 2 != 0 {
            return Err(Error::Validation(format!(
                "state tensor needs an even channel count, got {}",
                x.c
            )));
        }
        let dims = Dims::new(x.c / 2, x.w, x.h);
        let n = dims.len();
        Self::new(dims, x.data[..n].to_vec(), x.data[n..].to_vec(), normalized)
    }

    pub fn t_level(&self, k: usize) -> &[R] {
        let n = self.dims.level_len();
        &self.temperature[k * n..(k + 1) * n]
    }

    pub fn s_level(&self, k: usize) -> &[R] {
        let n = self.dims.level_len();
        &self.salinity[k * n..(k + 1) * n]
    }
}

fn check_bounds<R: Real>(name: &str, v: &[R], (lo, hi): (f64, f64)) -> Result<()> {
    if let Some(p) = v.iter().position(|x| {
        let x = x.f64();
        x < lo || x > hi
    }) {
        return Err(Error::Validation(format!(
            "{name} value {} at flat index {p} outside sanity bounds [{lo}, {hi}]",
            v[p]
        )));
    }
    Ok(())
}

/// Per-level means and standard deviations of both variables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    #[serde(rename = "mean_T")]
    pub mean_t: Vec<f64>,
    #[serde(rename = "std_T")]
    pub std_t: Vec<f64>,
    #[serde(rename = "mean_S")]
    pub mean_s: Vec<f64>,
    #[serde(rename = "std_S")]
    pub std_s: Vec<f64>,
}

impl NormStats {
    pub fn levels(&self) -> usize {
        self.mean_t.len()
    }

    fn check(&self, z: usize) -> Result<()> {
        let ok = [&self.mean_t, &self.std_t, &self.mean_s, &self.std_s]
            .iter()
            .all(|v| v.len() == z);
        if !ok {
            return Err(Error::Validation(format!(
                "norm stats have {} levels, state has {z}",
                self.levels()
            )));
        }
        if self.std_t.iter().chain(&self.std_s).any(|&s| !(s > 0.0)) {
            return Err(Error::Validation("norm stats std must be > 0".into()));
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        crate::error::read_json(path)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::error::write_json(path, self)
    }
}

/// Population mean/std per level over all cells of all states, std floored.
pub fn compute_norm_stats<R: Real>(dataset: &[OceanState<R>]) -> Result<NormStats> {
    let first = dataset
        .first()
        .ok_or_else(|| Error::Validation("cannot compute norm stats of an empty dataset".into()))?;
    let dims = first.dims;
    if let Some(bad) = dataset.iter().find(|s| s.dims != dims) {
        return Err(Error::Validation(format!(
            "mixed dims in dataset: {} vs {}",
            dims, bad.dims
        )));
    }
    if dataset.iter().any(|s| s.normalized) {
        return Err(Error::Validation(
            "norm stats must be computed on unnormalized states".into(),
        ));
    }
    let level = |field: fn(&OceanState<R>, usize) -> &[R], k: usize| {
        let count = (dataset.len() * dims.level_len()) as f64;
        let mean = dataset
            .iter()
            .flat_map(|s| field(s, k).iter())
            .map(|v| v.f64())
            .sum::<f64>()
            / count;
        let var = dataset
            .iter()
            .flat_map(|s| field(s, k).iter())
            .map(|v| (v.f64() - mean).powi(2))
            .sum::<f64>()
            / count;
        let std = var.sqrt();
        (mean, if std < STD_FLOOR { 1.0 } else { std })
    };
    let mut stats = NormStats {
        mean_t: Vec::with_capacity(dims.z),
        std_t: Vec::with_capacity(dims.z),
        mean_s: Vec::with_capacity(dims.z),
        std_s: Vec::with_capacity(dims.z),
    };
    for k in 0..dims.z {
        let (m, s) = level(OceanState::t_level, k);
        stats.mean_t.push(m);
        stats.std_t.push(s);
        let (m, s) = level(OceanState::s_level, k);
        stats.mean_s.push(m);
        stats.std_s.push(s);
    }
    Ok(stats)
}

fn map_levels<R: Real>(
    state: &OceanState<R>,
    stats: &NormStats,
    f: impl Fn(f64, f64, f64) -> f64,
    normalized: bool,
) -> Result<OceanState<R>> {
    stats.check(state.dims.z)?;
    let n = state.dims.level_len();
    let apply = |field: &[R], mean: &[f64], std: &[f64]| -> Vec<R> {
        field
            .iter()
            .enumerate()
            .map(|(p, v)| {
                let k = p / n;
                R::of(f(v.f64(), mean[k], std[k]))
            })
            .collect()
    };
    OceanState::new(
        state.dims,
        apply(&state.temperature, &stats.mean_t, &stats.std_t),
        apply(&state.salinity, &stats.mean_s, &stats.std_s),
        normalized,
    )
}

pub fn normalize_state<R: Real>(state: &OceanState<R>, stats: &NormStats) -> Result<OceanState<R>> {
    if state.normalized {
        return Err(Error::Validation("state is already normalized".into()));
    }
    map_levels(state, stats, |v, m, s| (v - m) / s, true)
}

pub fn denormalize_state<R: Real>(
    state: &OceanState<R>,
    stats: &NormStats,
) -> Result<OceanState<R>> {
    if !state.normalized {
        return Err(Error::Validation("state is not normalized".into()));
    }
    map_levels(state, stats, |v, m, s| v * s + m, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn level_state(dims: Dims, t: impl Fn(usize) -> f64) -> OceanState<f64> {
        let n = dims.level_len();
        let temperature = (0..dims.len()).map(|p| t(p / n)).collect();
        OceanState::new(dims, temperature, vec![35.0; dims.len()], false).unwrap()
    }

    #[test]
    fn degenerate_dims_are_rejected() {
        assert!(Dims::new(0, 4, 4).validate().is_err());
        assert!(Dims::new(1, 4, 4).validate().is_err());
        assert!(Dims::new(2, 1, 1).validate().is_ok());
    }

    #[test]
    fn constant_level_gets_floored_std() {
        let dims = Dims::new(3, 4, 2);
        let stats = compute_norm_stats(&[level_state(dims, |_| 10.0)]).unwrap();
        assert_eq!(stats.mean_t[1], 10.0);
        assert_eq!(stats.std_t[1], 1.0);
        assert_eq!(stats.std_s[0], 1.0);
    }

    #[test]
    fn two_point_population_std() {
        let dims = Dims::new(2, 3, 3);
        let a = level_state(dims, |_| 1.0);
        let b = level_state(dims, |_| 3.0);
        let stats = compute_norm_stats(&[a, b]).unwrap();
        assert_eq!(stats.mean_t, vec![2.0, 2.0]);
        assert_eq!(stats.std_t, vec![1.0, 1.0]);
    }

    #[test]
    fn empty_and_mixed_datasets_fail() {
        assert!(compute_norm_stats::<f64>(&[]).is_err());
        let a = level_state(Dims::new(2, 2, 2), |_| 1.0);
        let b = level_state(Dims::new(2, 3, 2), |_| 1.0);
        assert!(compute_norm_stats(&[a, b]).is_err());
    }

    #[test]
    fn mean_level_normalizes_to_zero_and_zero_maps_back_to_mean() {
        let dims = Dims::new(2, 2, 2);
        let a = level_state(dims, |k| 5.0 + k as f64);
        let b = level_state(dims, |k| 7.0 + 3.0 * k as f64);
        let stats = compute_norm_stats(&[a.clone(), b]).unwrap();
        let centred = level_state(dims, |k| stats.mean_t[k]);
        let norm = normalize_state(&centred, &stats).unwrap();
        assert!(norm.temperature.iter().all(|&v| v == 0.0));
        let zeros = OceanState::new(dims, vec![0.0; 8], vec![0.0; 8], true).unwrap();
        let back = denormalize_state(&zeros, &stats).unwrap();
        assert_eq!(back.t_level(1), &[stats.mean_t[1]; 4]);
    }

    #[test]
    fn double_normalization_is_rejected() {
        let dims = Dims::new(2, 2, 2);
        let a = level_state(dims, |k| 5.0 + k as f64);
        let stats = compute_norm_stats(&[a.clone()]).unwrap();
        let n = normalize_state(&a, &stats).unwrap();
        assert!(normalize_state(&n, &stats).is_err());
        assert!(denormalize_state(&a, &stats).is_err());
    }

    #[test]
    fn sanity_bounds_apply_only_to_physical_units() {
        let dims = Dims::new(2, 1, 1);
        assert!(OceanState::new(dims, vec![50.0, 1.0], vec![35.0; 2], false).is_err());
        assert!(OceanState::new(dims, vec![50.0, 1.0], vec![35.0; 2], true).is_ok());
        assert!(OceanState::new(dims, vec![f64::NAN, 1.0], vec![35.0; 2], true).is_err());
    }

    #[test]
    fn regular_geometry_is_valid_and_symmetric() {
        let g = GridGeometry::regular(Dims::new(12, 48, 32), &GeometryParams::default()).unwrap();
        assert!((g.thickness_m.iter().sum::<f64>() - 4000.0).abs() < 1e-9);
        let v0 = g.volume(3, 0, 0);
        let v1 = g.volume(3, 0, 31);
        assert!((v0 - v1).abs() / v0 < 1e-12);
        assert!(g.volume(3, 0, 16) > v0);
    }

    proptest! {
        #[test]
        fn normalization_round_trip(vals in proptest::collection::vec(-2.0f64..30.0, 24)) {
            let dims = Dims::new(3, 4, 2);
            let a = OceanState::new(dims, vals.clone(), vals.iter().map(|v| 30.0 + v / 10.0).collect(), false).unwrap();
            let b = OceanState::new(dims, vals.iter().map(|v| v * 0.5 + 3.0).collect(), vec![34.0; 24], false).unwrap();
            let stats = compute_norm_stats(&[a.clone(), b]).unwrap();
            let back = denormalize_state(&normalize_state(&a, &stats).unwrap(), &stats).unwrap();
            for (x, y) in back.temperature.iter().zip(&a.temperature).chain(back.salinity.iter().zip(&a.salinity)) {
                prop_assert!((x - y).abs() <= 1e-6);
            }
        }
    }
}
