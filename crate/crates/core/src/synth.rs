//! Synthetic, stably stratified training states.
//!
//! Warm salty low latitudes, cold fresh high latitudes, an exponential
//! thermocline, smooth random anomalies, and a final convective repair so that
//! every emitted state is hydrostatically stable.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{read_json, write_json, Error, Result};
use crate::grid::{compute_norm_stats, Dims, GeometryParams, GridGeometry, NormStats, OceanState};
use crate::integrator::convective_adjust_state;
use crate::ostx;
use crate::physics::EosParams;
use crate::rng::{self, Domain};

/// Share of each anomaly that is coherent over the whole column.
const VERTICAL_COHERENCE: f64 = 0.8;
/// Latitude of the subtropical salinity maximum and its e-folding width.
const SALT_MAX_LAT: f64 = 25.0;
const SALT_WIDTH_LAT: f64 = 20.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub seed: u64,
    #[serde(rename = "Z")]
    pub z: usize,
    #[serde(rename = "W")]
    pub w: usize,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "surface_T_equator")]
    pub surface_t_equator: f64,
    #[serde(rename = "surface_T_pole")]
    pub surface_t_pole: f64,
    #[serde(rename = "deep_T")]
    pub deep_t: f64,
    pub thermocline_depth_m: f64,
    #[serde(rename = "surface_S_mid")]
    pub surface_s_mid: f64,
    #[serde(rename = "S_contrast")]
    pub s_contrast: f64,
    /// Anomaly amplitude relative to each level's meridional spread.
    pub noise_amp: f64,
    /// Gaussian smoothing radius (standard deviation) in grid cells.
    pub noise_smooth_cells: f64,
    pub geometry: GeometryParams,
    pub eos: EosParams,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            seed: 0,
            z: 12,
            w: 48,
            h: 32,
            surface_t_equator: 28.0,
            surface_t_pole: 4.0,
            deep_t: 2.0,
            thermocline_depth_m: 500.0,
            surface_s_mid: 35.0,
            s_contrast: 1.0,
            noise_amp: 0.3,
            noise_smooth_cells: 3.0,
            geometry: GeometryParams::default(),
            eos: EosParams::default(),
        }
    }
}

impl SynthParams {
    pub fn dims(&self) -> Dims {
        Dims::new(self.z, self.w, self.h)
    }

    pub fn geometry(&self) -> Result<GridGeometry> {
        GridGeometry::regular(self.dims(), &self.geometry)
    }

    pub fn validate(&self) -> Result<()> {
        self.dims()
            .validate()
            .map_err(|e| Error::config("Z/W/H", e.to_string()))?;
        if !(self.surface_t_equator > self.surface_t_pole && self.surface_t_pole > self.deep_t) {
            return Err(Error::config(
                "surface_T_equator",
                "need surface_T_equator > surface_T_pole > deep_T",
            ));
        }
        if !(self.thermocline_depth_m > 0.0) {
            return Err(Error::config("thermocline_depth_m", "must be > 0"));
        }
        if !(self.noise_amp >= 0.0) {
            return Err(Error::config("noise_amp", "must be >= 0"));
        }
        if !(self.noise_smooth_cells >= 0.0) {
            return Err(Error::config("noise_smooth_cells", "must be >= 0"));
        }
        self.eos.validate()
    }

    /// Noise-free `(T, S)` profile at level `k`, latitude `lat_deg`.
    fn base(&self, depth_m: f64, lat_deg: f64, lat_extent: f64) -> (f64, f64) {
        let decay = (-depth_m / self.thermocline_depth_m).exp();
        let x = (std::f64::consts::FRAC_PI_2 * lat_deg.abs() / lat_extent).min(std::f64::consts::FRAC_PI_2);
        let surface_t = self.surface_t_pole + (self.surface_t_equator - self.surface_t_pole) * x.cos().powi(2);
        let salt_shape = (-((lat_deg.abs() - SALT_MAX_LAT) / SALT_WIDTH_LAT).powi(2)).exp();
        let surface_s = self.surface_s_mid + self.s_contrast * (salt_shape - 0.5);
        (
            self.deep_t + (surface_t - self.deep_t) * decay,
            self.surface_s_mid + (surface_s - self.surface_s_mid) * decay,
        )
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = k.iter().sum();
    k.into_iter().map(|v| v / sum).collect()
}

fn reflect(p: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut q = p.rem_euclid(period);
    if q >= n {
        q = period - q;
    }
    q as usize
}

/// Smoothed unit-variance white noise on a `W x H` plane.
fn smooth_noise(rng: &mut impl Rng, w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let white: Vec<f64> = (0..w * h).map(|_| rng.sample(StandardNormal)).collect();
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for i in 0..w {
        for j in 0..h {
            tmp[i * h + j] = kernel
                .iter()
                .enumerate()
                .map(|(d, kv)| kv * white[i * h + reflect(j as isize + d as isize - r, h)])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for i in 0..w {
        for j in 0..h {
            out[i * h + j] = kernel
                .iter()
                .enumerate()
                .map(|(d, kv)| kv * tmp[reflect(i as isize + d as isize - r, w) * h + j])
                .sum();
        }
    }
    let n = out.len() as f64;
    let mean = out.iter().sum::<f64>() / n;
    let std = (out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std > 0.0 {
        out.iter_mut().for_each(|v| *v = (*v - mean) / std);
    }
    out
}

/// One deterministic snapshot; identical for identical `(params, index)`.
pub fn generate_state(params: &SynthParams, snapshot_index: u64) -> Result<OceanState<f32>> {
    params.validate()?;
    let geom = params.geometry()?;
    generate_on(params, &geom, snapshot_index)
}

fn generate_on(params: &SynthParams, geom: &GridGeometry, snapshot_index: u64) -> Result<OceanState<f32>> {
    let dims = geom.dims;
    let lat_extent = geom.lat_deg.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
    let n = dims.len();
    let (mut t, mut s) = (vec![0.0f64; n], vec![0.0f64; n]);

    let mut rng = rng::stream(params.seed, Domain::Snapshot, snapshot_index);
    let kernel = gaussian_kernel(params.noise_smooth_cells);
    let coherent_t = smooth_noise(&mut rng, dims.w, dims.h, &kernel);
    let coherent_s = smooth_noise(&mut rng, dims.w, dims.h, &kernel);
    let (a, b) = (VERTICAL_COHERENCE.sqrt(), (1.0 - VERTICAL_COHERENCE).sqrt());

    for k in 0..dims.z {
        let base: Vec<(f64, f64)> = geom
            .lat_deg
            .iter()
            .map(|&lat| params.base(geom.depth_m[k], lat, lat_extent))
            .collect();
        let spread = |f: fn(&(f64, f64)) -> f64| {
            let m = base.iter().map(f).sum::<f64>() / base.len() as f64;
            (base.iter().map(|v| (f(v) - m).powi(2)).sum::<f64>() / base.len() as f64).sqrt()
        };
        let (spread_t, spread_s) = (spread(|v| v.0), spread(|v| v.1));
        let own_t = smooth_noise(&mut rng, dims.w, dims.h, &kernel);
        let own_s = smooth_noise(&mut rng, dims.w, dims.h, &kernel);
        for i in 0..dims.w {
            for j in 0..dims.h {
                let q = i * dims.h + j;
                let p = dims.idx(k, i, j);
                let nt = a * coherent_t[q] + b * own_t[q];
                let ns = a * coherent_s[q] + b * own_s[q];
                t[p] = (base[j].0 + params.noise_amp * spread_t * nt).max(FREEZING_T);
                s[p] = base[j].1 + params.noise_amp * spread_s * ns;
            }
        }
    }
    let mut state = OceanState::new(
        dims,
        t.into_iter().map(|v| v as f32).collect(),
        s.into_iter().map(|v| v as f32).collect(),
        false,
    )?;
    convective_adjust_state(&mut state, geom, &params.eos);
    Ok(state)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub checksum_sha256: String,
}

/// Dataset index; paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub params: SynthParams,
    pub files: Vec<ManifestEntry>,
    pub norm_stats_path: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const NORM_STATS_FILE: &str = "norm_stats.json";

/// Seawater freezing point; colder noise excursions are clipped to it.
pub const FREEZING_T: f64 = -1.9;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `n_states` OSTX files, `norm_stats.json` and `manifest.json` into `out_dir`.
pub fn generate_dataset(params: &SynthParams, n_states: usize, out_dir: &Path) -> Result<Manifest> {
    params.validate()?;
    if n_states == 0 {
        return Err(Error::config("n", "need at least one state"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let geom = params.geometry()?;
    let states: Vec<OceanState<f32>> = (0..n_states as u64)
        .into_par_iter()
        .map(|idx| generate_on(params, &geom, idx))
        .collect::<Result<_>>()?;

    let mut files = Vec::with_capacity(n_states);
    for (idx, st) in states.iter().enumerate() {
        let name = format!("state_{idx:05}.ostx");
        let bytes = ostx::encode_state(st)?;
        let path = out_dir.join(&name);
        std::fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        files.push(ManifestEntry {
            path: name,
            checksum_sha256: sha256_hex(&bytes),
        });
    }
    let stats = compute_norm_stats(&states)?;
    stats.save(&out_dir.join(NORM_STATS_FILE))?;
    let manifest = Manifest {
        params: params.clone(),
        files,
        norm_stats_path: NORM_STATS_FILE.into(),
    };
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// A manifest together with the directory its relative paths resolve against.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub root: PathBuf,
}

impl Dataset {
    pub fn open(manifest_path: &Path) -> Result<Self> {
        if !manifest_path.exists() {
            return Err(Error::NotFound {
                what: "dataset manifest",
                path: manifest_path.to_path_buf(),
            });
        }
        let manifest: Manifest = read_json(manifest_path)?;
        let root = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(Dataset { manifest, root })
    }

    pub fn norm_stats_path(&self) -> PathBuf {
        self.root.join(&self.manifest.norm_stats_path)
    }

    pub fn norm_stats(&self) -> Result<NormStats> {
        NormStats::load(&self.norm_stats_path())
    }

    pub fn geometry(&self) -> Result<GridGeometry> {
        self.manifest.params.geometry()
    }

    /// Reads every state, verifying its checksum.
    pub fn load_states(&self) -> Result<Vec<OceanState<f32>>> {
        self.manifest
            .files
            .iter()
            .map(|entry| {
                let path = self.root.join(&entry.path);
                let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                if sha256_hex(&bytes) != entry.checksum_sha256 {
                    return Err(Error::Integrity {
                        path,
                        msg: "checksum does not match manifest".into(),
                    });
                }
                Ok(ostx::decode_state(&bytes, &path)?.0)
            })
            .collect()
    }
}
