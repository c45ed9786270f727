//! Column-physics integrator used to check how generated states evolve:
//! explicit vertical diffusion, surface restoring, convective adjustment.
//! There are no horizontal dynamics; every water column evolves on its own.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridGeometry, OceanState};
use crate::physics::{self, EosParams};
use crate::scalar::Real;

const SECONDS_PER_DAY: f64 = 86_400.0;
const DAYS_PER_YEAR: f64 = 365.0;

/// Mixes statically unstable neighbours of one column until it is stable.
///
/// Cells are pooled into blocks whose members all carry the block's
/// volume-weighted mean T and S; a block is merged with the block above it
/// whenever it is lighter. With a linear equation of state this yields a
/// stable column after at most `Z - 1` merges. Each merge counts as one event.
/// Untouched cells keep their exact values. Densities are compared in `f64`
/// on the stored values, the same arithmetic [`physics::density_error`] sees
/// after casting.
pub fn convective_adjust_column<R: Real>(
    t: &mut [R],
    s: &mut [R],
    volumes: &[f64],
    eos: &EosParams,
) -> usize {
    assert!(t.len() == s.len() && t.len() == volumes.len());
    struct Block<R> {
        start: usize,
        len: usize,
        vol: f64,
        heat: f64,
        salt: f64,
        t: R,
        s: R,
    }
    let rho = |b: &Block<R>| eos.rho(b.t.f64(), b.s.f64());
    let mut stack: Vec<Block<R>> = Vec::with_capacity(t.len());
    let mut events = 0;
    for k in 0..t.len() {
        stack.push(Block {
            start: k,
            len: 1,
            vol: volumes[k],
            heat: volumes[k] * t[k].f64(),
            salt: volumes[k] * s[k].f64(),
            t: t[k],
            s: s[k],
        });
        while stack.len() >= 2 && rho(&stack[stack.len() - 1]) < rho(&stack[stack.len() - 2]) {
            let lower = stack.pop().unwrap();
            let upper = stack.last_mut().unwrap();
            upper.len += lower.len;
            upper.vol += lower.vol;
            upper.heat += lower.heat;
            upper.salt += lower.salt;
            upper.t = R::of(upper.heat / upper.vol);
            upper.s = R::of(upper.salt / upper.vol);
            events += 1;
        }
    }
    for b in stack.iter().filter(|b| b.len > 1) {
        t[b.start..b.start + b.len].fill(b.t);
        s[b.start..b.start + b.len].fill(b.s);
    }
    events
}

/// Applies [`convective_adjust_column`] to every column of a state.
pub fn convective_adjust_state<R: Real>(
    state: &mut OceanState<R>,
    geometry: &GridGeometry,
    eos: &EosParams,
) -> usize {
    let dims = state.dims;
    let (mut t, mut s, mut v) = (vec![R::zero(); dims.z], vec![R::zero(); dims.z], vec![0.0; dims.z]);
    let mut events = 0;
    for i in 0..dims.w {
        for j in 0..dims.h {
            for k in 0..dims.z {
                let p = dims.idx(k, i, j);
                t[k] = state.temperature[p];
                s[k] = state.salinity[p];
                v[k] = geometry.cell_volume[p];
            }
            let n = convective_adjust_column(&mut t, &mut s, &v, eos);
            if n > 0 {
                events += n;
                for k in 0..dims.z {
                    let p = dims.idx(k, i, j);
                    state.temperature[p] = t[k];
                    state.salinity[p] = s[k];
                }
            }
        }
    }
    events
}

/// Surface restoring targets, one value per latitude row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Climatology {
    #[serde(rename = "surface_T")]
    pub surface_t: Vec<f64>,
    #[serde(rename = "surface_S")]
    pub surface_s: Vec<f64>,
}

impl Climatology {
    /// Zonal- and ensemble-mean surface fields of a set of states.
    pub fn from_states<R: Real>(states: &[OceanState<R>]) -> Result<Self> {
        let dims = states
            .first()
            .ok_or_else(|| Error::Validation("climatology needs at least one state".into()))?
            .dims;
        let mut clim = Climatology {
            surface_t: vec![0.0; dims.h],
            surface_s: vec![0.0; dims.h],
        };
        for st in states {
            if st.dims != dims || st.normalized {
                return Err(Error::Validation(
                    "climatology states must share dims and be unnormalized".into(),
                ));
            }
            for i in 0..dims.w {
                for j in 0..dims.h {
                    let p = dims.idx(0, i, j);
                    clim.surface_t[j] += st.temperature[p].f64();
                    clim.surface_s[j] += st.salinity[p].f64();
                }
            }
        }
        let n = (states.len() * dims.w) as f64;
        clim.surface_t.iter_mut().chain(clim.surface_s.iter_mut()).for_each(|v| *v /= n);
        Ok(clim)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorConfig {
    pub dt_seconds: f64,
    pub years: f64,
    /// Vertical diffusivity, m²/s.
    pub kappa_v: f64,
    /// Surface restoring timescale in days; 0 disables restoring.
    pub restore_days: f64,
    /// Restoring targets; when absent the caller supplies one.
    pub climatology: Option<Climatology>,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            dt_seconds: SECONDS_PER_DAY,
            years: 1.0,
            kappa_v: 1e-4,
            restore_days: 60.0,
            climatology: None,
        }
    }
}

/// Summary of one integration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub state_path: String,
    pub years: f64,
    #[serde(rename = "rms_T_drift")]
    pub rms_t_drift: f64,
    #[serde(rename = "rms_S_drift")]
    pub rms_s_drift: f64,
    pub convective_events: usize,
    pub density_error_final: f64,
}

pub const DRIFT_HEADER: &str =
    "state_path,years,rms_T_drift,rms_S_drift,convective_events,density_error_final";

pub fn write_drift_csv<W: Write>(out: W, rows: &[DriftReport]) -> Result<()> {
    physics::write_csv(out, rows)
}

/// A validated integrator bound to a grid.
#[derive(Clone, Debug)]
pub struct Integrator {
    cfg: IntegratorConfig,
    geometry: GridGeometry,
    eos: EosParams,
    climatology: Climatology,
    /// `kappa dt A / dz` exchange coefficient per interface and column,
    /// indexed `[(k * W + i) * H + j]` for the interface below level `k`.
    exchange: Vec<f64>,
    restore_weight: f64,
}

impl Integrator {
    pub fn new(
        cfg: IntegratorConfig,
        geometry: GridGeometry,
        eos: EosParams,
        fallback_climatology: Option<Climatology>,
    ) -> Result<Self> {
        eos.validate()?;
        if !(cfg.dt_seconds > 0.0) {
            return Err(Error::config("dt_seconds", "must be > 0"));
        }
        if !(cfg.kappa_v >= 0.0) {
            return Err(Error::config("kappa_v", "must be >= 0"));
        }
        if !(cfg.years >= 0.0) {
            return Err(Error::config("years", "must be >= 0"));
        }
        if !(cfg.restore_days >= 0.0) {
            return Err(Error::config("restore_days", "must be >= 0"));
        }
        let dims = geometry.dims;
        let min_dz = geometry
            .thickness_m
            .iter()
            .copied()
            .chain(geometry.depth_m.windows(2).map(|p| p[1] - p[0]))
            .fold(f64::INFINITY, f64::min);
        let cfl = cfg.kappa_v * cfg.dt_seconds / (min_dz * min_dz);
        if cfl > 0.5 {
            return Err(Error::config(
                "dt_seconds",
                format!("diffusion CFL number {cfl:.3} exceeds 0.5"),
            ));
        }
        let restore_weight = if cfg.restore_days > 0.0 {
            cfg.dt_seconds / (cfg.restore_days * SECONDS_PER_DAY)
        } else {
            0.0
        };
        if restore_weight > 1.0 {
            return Err(Error::config("restore_days", "restoring faster than one time step"));
        }
        let climatology = cfg
            .climatology
            .clone()
            .or(fallback_climatology)
            .unwrap_or_else(|| Climatology {
                surface_t: vec![0.0; dims.h],
                surface_s: vec![0.0; dims.h],
            });
        if restore_weight > 0.0
            && (climatology.surface_t.len() != dims.h || climatology.surface_s.len() != dims.h)
        {
            return Err(Error::config("climatology", format!("needs {} latitude values", dims.h)));
        }
        let mut exchange = vec![0.0; dims.len()];
        for k in 0..dims.z - 1 {
            let spacing = geometry.depth_m[k + 1] - geometry.depth_m[k];
            for i in 0..dims.w {
                for j in 0..dims.h {
                    let p = dims.idx(k, i, j);
                    let area = geometry.cell_volume[p] / geometry.thickness_m[k];
                    exchange[p] = cfg.kappa_v * cfg.dt_seconds * area / spacing;
                }
            }
        }
        Ok(Integrator {
            cfg,
            geometry,
            eos,
            climatology,
            exchange,
            restore_weight,
        })
    }

    pub fn config(&self) -> &IntegratorConfig {
        &self.cfg
    }

    pub fn n_steps(&self) -> usize {
        (self.cfg.years * DAYS_PER_YEAR * SECONDS_PER_DAY / self.cfg.dt_seconds).round() as usize
    }

    /// Advances one time step; returns the number of convective events.
    pub fn step(&self, state: &mut OceanState<f64>) -> Result<usize> {
        let dims = state.dims;
        if dims != self.geometry.dims {
            return Err(Error::Validation("state does not match integrator grid".into()));
        }
        if state.normalized {
            return Err(Error::Validation("integrator needs an unnormalized state".into()));
        }
        let vol = &self.geometry.cell_volume;
        for field in [&mut state.temperature, &mut state.salinity] {
            if self.cfg.kappa_v > 0.0 {
                diffuse(field, &self.exchange, vol, dims);
            }
        }
        if self.restore_weight > 0.0 {
            for i in 0..dims.w {
                for j in 0..dims.h {
                    let p = dims.idx(0, i, j);
                    let w = self.restore_weight;
                    state.temperature[p] += w * (self.climatology.surface_t[j] - state.temperature[p]);
                    state.salinity[p] += w * (self.climatology.surface_s[j] - state.salinity[p]);
                }
            }
        }
        Ok(convective_adjust_state(state, &self.geometry, &self.eos))
    }

    /// Runs the configured duration and reports drift from the initial state.
    pub fn integrate(&self, initial: &OceanState<f64>, state_path: &str) -> Result<DriftReport> {
        let mut state = initial.clone();
        let mut events = 0;
        for n in 0..self.n_steps() {
            events += self.step(&mut state)?;
            if state.temperature.iter().chain(&state.salinity).any(|v| !v.is_finite()) {
                let days = (n + 1) as f64 * self.cfg.dt_seconds / SECONDS_PER_DAY;
                return Err(Error::Numeric(format!(
                    "non-finite field after {days} simulated days"
                )));
            }
        }
        let rms = |a: &[f64], b: &[f64]| {
            (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
        };
        let rho = physics::density(&state, &self.eos)?;
        Ok(DriftReport {
            state_path: state_path.to_string(),
            years: self.cfg.years,
            rms_t_drift: rms(&state.temperature, &initial.temperature),
            rms_s_drift: rms(&state.salinity, &initial.salinity),
            convective_events: events,
            density_error_final: physics::density_error(&rho, &self.geometry)?,
        })
    }
}

/// Explicit zero-flux vertical diffusion; transfers are antisymmetric so the
/// volume-weighted column content is conserved.
fn diffuse(field: &mut [f64], exchange: &[f64], vol: &[f64], dims: crate::grid::Dims) {
    let old = field.to_vec();
    for k in 0..dims.z - 1 {
        for i in 0..dims.w {
            for j in 0..dims.h {
                let up = dims.idx(k, i, j);
                let down = dims.idx(k + 1, i, j);
                let q = exchange[up] * (old[down] - old[up]);
                field[up] += q / vol[up];
                field[down] -= q / vol[down];
            }
        }
    }
}
