//! End-to-end generation from a checkpoint, and the paired
//! constrained/unconstrained comparison against the training data.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraint::{ConstraintConfig, WallRows};
use crate::diffusion::{build_schedule, sample, NoiseSchedule, SampleOutput, SampleRequest};
use crate::error::{Error, Result};
use crate::grid::{GridGeometry, NormStats, OceanState};
use crate::integrator::{Climatology, DriftReport, Integrator, IntegratorConfig};
use crate::net::checkpoint::Checkpoint;
use crate::net::Denoiser;
use crate::ostx;
use crate::physics::{self, BoxConfig, MeanStd, MetricsReport};
use crate::synth::Dataset;

/// Guidance strength used by the desk-scale sampling defaults.
///
/// The constraint gradient of one cell is `2/N` times its channel's mean
/// offset, with `N = W x H`. On a 48x32 grid, `eta = 1e-3` moves a channel mean
/// by well under 0.1% of its offset over a whole chain. This value makes the
/// final steps remove a sizeable fraction of the offset while keeping every
/// per-step contraction below one.
pub const DESK_ETA: f64 = 5.0;

fn default_n() -> usize {
    8
}

/// Sampling settings (`sample` subcommand configuration file).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub n: usize,
    /// Diffusion steps; `None` uses the value the checkpoint was trained with.
    #[serde(rename = "S")]
    pub n_steps: Option<usize>,
    pub seed: u64,
    pub constrained: bool,
    pub trace: bool,
    pub eta: f64,
    pub lambda: f64,
    pub k_exp: f64,
    pub mu: Option<Vec<f64>>,
    pub walls: WallRows,
    /// Dataset manifest; `None` uses the path recorded in the checkpoint.
    pub manifest: Option<PathBuf>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        let c = ConstraintConfig::default();
        SampleConfig {
            n: default_n(),
            n_steps: None,
            seed: 0,
            constrained: false,
            trace: false,
            eta: DESK_ETA,
            lambda: c.lambda,
            k_exp: c.k_exp,
            mu: None,
            walls: c.walls,
            manifest: None,
        }
    }
}

impl SampleConfig {
    pub fn constraint(&self) -> ConstraintConfig {
        ConstraintConfig {
            mu: self.mu.clone(),
            eta: self.eta,
            lambda: self.lambda,
            k_exp: self.k_exp,
            walls: self.walls,
        }
    }
}

/// A loaded checkpoint with everything needed to turn noise into physical states.
pub struct Generator {
    pub net: Denoiser<f32>,
    pub checkpoint: Checkpoint,
    pub dataset: Dataset,
    pub norm_stats: NormStats,
    pub geometry: GridGeometry,
}

impl Generator {
    pub fn open(checkpoint: &Path, manifest: Option<&Path>) -> Result<Self> {
        let ck = Checkpoint::load(checkpoint)?;
        let net = ck.denoiser::<f32>()?;
        let manifest = manifest
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(&ck.header.train.manifest));
        let dataset = Dataset::open(&manifest)?;
        let norm_stats = dataset.norm_stats()?;
        let geometry = dataset.geometry()?;
        if geometry.dims != ck.header.data_dims {
            return Err(Error::Mismatch(format!(
                "checkpoint was trained on {}, dataset grid is {}",
                ck.header.data_dims, geometry.dims
            )));
        }
        Ok(Generator { net, checkpoint: ck, dataset, norm_stats, geometry })
    }

    pub fn schedule(&self, n_steps: Option<usize>) -> Result<NoiseSchedule> {
        build_schedule(n_steps.unwrap_or(self.checkpoint.header.train.n_steps))
    }

    pub fn generate(
        &self,
        sched: &NoiseSchedule,
        constraint: Option<&ConstraintConfig>,
        n: usize,
        seed: u64,
        trace: bool,
    ) -> Result<SampleOutput<f32>> {
        let cfg = self.net.config();
        let req = SampleRequest {
            dims: self.geometry.dims,
            norm_stats: &self.norm_stats,
            constraint,
            n,
            seed,
            trace,
            padded_w: cfg.padded_w,
            padded_h: cfg.padded_h,
        };
        sample(&self.net, sched, &req)
    }

    pub fn generate_with(&self, cfg: &SampleConfig) -> Result<SampleOutput<f32>> {
        let sched = self.schedule(cfg.n_steps)?;
        let c = cfg.constraint();
        self.generate(&sched, cfg.constrained.then_some(&c), cfg.n, cfg.seed, cfg.trace)
    }
}

/// Writes states as `sample_000.ostx`, ... and returns the file names.
pub fn write_states(states: &[OceanState<f32>], geometry: &GridGeometry, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    states
        .iter()
        .enumerate()
        .map(|(i, st)| {
            let path = dir.join(format!("sample_{i:03}.ostx"));
            ostx::write_state(st, geometry, &path)?;
            Ok(path)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub n: usize,
    pub seed: u64,
    #[serde(rename = "S")]
    pub n_steps: Option<usize>,
    pub constraint: ConstraintConfig,
    pub integrator: IntegratorConfig,
    pub boxes: Option<BoxConfig>,
    pub manifest: Option<PathBuf>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            n: default_n(),
            seed: 0,
            n_steps: None,
            constraint: ConstraintConfig { eta: DESK_ETA, ..ConstraintConfig::default() },
            integrator: IntegratorConfig::default(),
            boxes: None,
            manifest: None,
        }
    }
}

/// One ensemble's metrics, as `mean ± std` over its members.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub n: usize,
    pub density_error_mean: f64,
    pub density_error_std: f64,
    #[serde(rename = "bw_mean_T_mean")]
    pub bw_t_mean: f64,
    #[serde(rename = "bw_mean_T_std")]
    pub bw_t_std: f64,
    #[serde(rename = "bw_mean_S_mean")]
    pub bw_s_mean: f64,
    #[serde(rename = "bw_mean_S_std")]
    pub bw_s_std: f64,
    #[serde(rename = "dw_mean_T_mean")]
    pub dw_t_mean: f64,
    #[serde(rename = "dw_mean_T_std")]
    pub dw_t_std: f64,
    #[serde(rename = "dw_mean_S_mean")]
    pub dw_s_mean: f64,
    #[serde(rename = "dw_mean_S_std")]
    pub dw_s_std: f64,
    #[serde(rename = "surf_var_T_mean")]
    pub surf_var_t_mean: f64,
    #[serde(rename = "surf_var_T_std")]
    pub surf_var_t_std: f64,
    #[serde(rename = "surf_var_S_mean")]
    pub surf_var_s_mean: f64,
    #[serde(rename = "surf_var_S_std")]
    pub surf_var_s_std: f64,
    pub convective_events_mean: f64,
    pub convective_events_std: f64,
    #[serde(rename = "rms_T_drift_mean")]
    pub rms_t_drift_mean: f64,
    #[serde(rename = "rms_T_drift_std")]
    pub rms_t_drift_std: f64,
    #[serde(rename = "rms_S_drift_mean")]
    pub rms_s_drift_mean: f64,
    #[serde(rename = "rms_S_drift_std")]
    pub rms_s_drift_std: f64,
}

impl SummaryRow {
    pub fn from_reports(label: &str, metrics: &[MetricsReport], drift: &[DriftReport]) -> Self {
        let ms = |f: &dyn Fn(&MetricsReport) -> f64| MeanStd::of(&metrics.iter().map(f).collect::<Vec<_>>());
        let ds = |f: &dyn Fn(&DriftReport) -> f64| MeanStd::of(&drift.iter().map(f).collect::<Vec<_>>());
        let de = ms(&|m| m.density_error_pct);
        let bt = ms(&|m| m.bw_mean_t);
        let bs = ms(&|m| m.bw_mean_s);
        let dt = ms(&|m| m.dw_mean_t);
        let dsal = ms(&|m| m.dw_mean_s);
        let vt = ms(&|m| m.surf_var_t);
        let vs = ms(&|m| m.surf_var_s);
        let ce = ds(&|d| d.convective_events as f64);
        let rt = ds(&|d| d.rms_t_drift);
        let rs = ds(&|d| d.rms_s_drift);
        SummaryRow {
            label: label.to_string(),
            n: metrics.len(),
            density_error_mean: de.mean,
            density_error_std: de.std,
            bw_t_mean: bt.mean,
            bw_t_std: bt.std,
            bw_s_mean: bs.mean,
            bw_s_std: bs.std,
            dw_t_mean: dt.mean,
            dw_t_std: dt.std,
            dw_s_mean: dsal.mean,
            dw_s_std: dsal.std,
            surf_var_t_mean: vt.mean,
            surf_var_t_std: vt.std,
            surf_var_s_mean: vs.mean,
            surf_var_s_std: vs.std,
            convective_events_mean: ce.mean,
            convective_events_std: ce.std,
            rms_t_drift_mean: rt.mean,
            rms_t_drift_std: rt.std,
            rms_s_drift_mean: rs.mean,
            rms_s_drift_std: rs.std,
        }
    }
}

pub const DATA_LABEL: &str = "Data";
pub const UNCONSTRAINED_LABEL: &str = "No-Constraint";
pub const CONSTRAINED_LABEL: &str = "Constraint";

#[derive(Clone, Debug)]
pub struct Ensemble {
    pub label: String,
    pub states: Vec<OceanState<f32>>,
    pub paths: Vec<String>,
    pub metrics: Vec<MetricsReport>,
    pub drift: Vec<DriftReport>,
}

impl Ensemble {
    pub fn summary(&self) -> SummaryRow {
        SummaryRow::from_reports(&self.label, &self.metrics, &self.drift)
    }
}

#[derive(Clone, Debug)]
pub struct CompareReport {
    pub data: Ensemble,
    pub unconstrained: Ensemble,
    pub constrained: Ensemble,
}

impl CompareReport {
    pub fn summary(&self) -> Vec<SummaryRow> {
        vec![self.data.summary(), self.constrained.summary(), self.unconstrained.summary()]
    }
}

fn assess(
    label: &str,
    states: Vec<OceanState<f32>>,
    paths: Vec<String>,
    geometry: &GridGeometry,
    boxes: &BoxConfig,
    integrator: &Integrator,
    eos: &physics::EosParams,
) -> Result<Ensemble> {
    let metrics = states
        .iter()
        .zip(&paths)
        .map(|(s, p)| physics::evaluate(s, geometry, eos, boxes, p))
        .collect::<Result<Vec<_>>>()?;
    let drift = states
        .par_iter()
        .zip(&paths)
        .map(|(s, p)| integrator.integrate(&s.cast::<f64>(), p))
        .collect::<Result<Vec<_>>>()?;
    Ok(Ensemble { label: label.to_string(), states, paths, metrics, drift })
}

/// Paired ensembles from one checkpoint with the same sample streams, plus
/// the training data as reference. Writes the generated states, per-state
/// metrics and drift, and `summary.csv` into `out_dir`.
pub fn compare(checkpoint: &Path, cfg: &CompareConfig, out_dir: &Path) -> Result<CompareReport> {
    if cfg.n == 0 {
        return Err(Error::config("n", "must be at least 1"));
    }
    cfg.constraint.validate()?;
    let gen = Generator::open(checkpoint, cfg.manifest.as_deref())?;
    let sched = gen.schedule(cfg.n_steps)?;
    let geometry = &gen.geometry;
    let eos = gen.dataset.manifest.params.eos.clone();
    let boxes = cfg.boxes.clone().unwrap_or_else(|| BoxConfig::default_for(geometry.dims));
    boxes.bottom_water.validate(geometry.dims)?;
    boxes.deep_water.validate(geometry.dims)?;

    let data_states = gen.dataset.load_states()?;
    let data_paths: Vec<String> = gen.dataset.manifest.files.iter().map(|f| format!("data/{}", f.path)).collect();
    let integrator = Integrator::new(
        cfg.integrator.clone(),
        geometry.clone(),
        eos.clone(),
        Some(Climatology::from_states(&data_states)?),
    )?;

    let plain = gen.generate(&sched, None, cfg.n, cfg.seed, false)?.states;
    let guided = gen.generate(&sched, Some(&cfg.constraint), cfg.n, cfg.seed, false)?.states;
    let rel = |dir: &str, files: Vec<PathBuf>| -> Vec<String> {
        files
            .iter()
            .map(|p| format!("{dir}/{}", p.file_name().unwrap().to_string_lossy()))
            .collect()
    };
    let plain_paths = rel("no_constraint", write_states(&plain, geometry, &out_dir.join("no_constraint"))?);
    let guided_paths = rel("constraint", write_states(&guided, geometry, &out_dir.join("constraint"))?);

    let report = CompareReport {
        data: assess(DATA_LABEL, data_states, data_paths, geometry, &boxes, &integrator, &eos)?,
        unconstrained: assess(UNCONSTRAINED_LABEL, plain, plain_paths, geometry, &boxes, &integrator, &eos)?,
        constrained: assess(CONSTRAINED_LABEL, guided, guided_paths, geometry, &boxes, &integrator, &eos)?,
    };

    let groups = [&report.data, &report.constrained, &report.unconstrained];
    let metrics: Vec<MetricsReport> = groups.iter().flat_map(|g| g.metrics.clone()).collect();
    let drift: Vec<DriftReport> = groups.iter().flat_map(|g| g.drift.clone()).collect();
    write_csv_file(&out_dir.join("metrics.csv"), &metrics)?;
    write_csv_file(&out_dir.join("drift.csv"), &drift)?;
    write_csv_file(&out_dir.join("summary.csv"), &report.summary())?;
    Ok(report)
}

pub fn write_csv_file<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    physics::write_csv(std::io::BufWriter::new(f), rows)
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<SummaryRow>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    physics::read_csv(f)
}
