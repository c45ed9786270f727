use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use oceangen::grid::GeometryParams;
use oceangen::integrator::{write_drift_csv, Climatology, Integrator, IntegratorConfig};
use oceangen::ostx;
use oceangen::physics::{evaluate, write_metrics_csv, BoxConfig, EosParams};
use oceangen::pipeline::{compare, write_csv_file, write_states, CompareConfig, Generator, SampleConfig};
use oceangen::synth::{generate_dataset, Dataset, SynthParams};
use oceangen::train::{resume, train_until, TrainConfig};
use oceangen::{Error, ErrorClass, GridGeometry, OceanState};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Generate stably stratified ocean states with a guided diffusion model.
#[derive(Parser, Debug)]
#[command(name = "oceangen", version, propagate_version = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic training dataset (OSTX states, manifest, normalization statistics).
    Synth(SynthArgs),
    /// Train the denoiser on a dataset; writes checkpoints and loss.csv.
    Train(TrainArgs),
    /// Draw states from a trained checkpoint.
    Sample(SampleArgs),
    /// Compute physical-consistency metrics of state files into metrics.csv.
    Eval(EvalArgs),
    /// Run the column model on state files and report drift into drift.csv.
    Integrate(IntegrateArgs),
    /// Paired constrained / unconstrained generation, evaluation and integration.
    Compare(CompareArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// JSON configuration file; flags override its values.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Directory receiving every output file.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Number of states to generate.
    #[arg(long, value_name = "COUNT", default_value_t = 16)]
    n: usize,
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Total optimizer updates.
    #[arg(long, value_name = "COUNT")]
    steps: Option<u64>,
    /// Resume from this checkpoint.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    #[arg(long, value_name = "COUNT")]
    n: Option<usize>,
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Apply the layer-mean guidance during sampling.
    #[arg(long, value_name = "BOOL", num_args = 0..=1, default_missing_value = "true")]
    constrained: Option<bool>,
    /// Write the per-step constraint trace to trace.csv.
    #[arg(long, value_name = "BOOL", num_args = 0..=1, default_missing_value = "true")]
    trace: Option<bool>,
    /// Diffusion steps (defaults to the checkpoint's).
    #[arg(long, value_name = "COUNT")]
    steps: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// OSTX state files.
    #[arg(required = true, value_name = "STATE")]
    states: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct IntegrateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(required = true, value_name = "STATE")]
    states: Vec<PathBuf>,
    /// Simulated duration.
    #[arg(long, value_name = "FLOAT")]
    years: Option<f64>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    #[arg(long, value_name = "COUNT")]
    n: Option<usize>,
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    #[arg(long, value_name = "COUNT")]
    steps: Option<usize>,
    #[arg(long, value_name = "FLOAT")]
    years: Option<f64>,
}

/// Grid description for commands that read bare state files.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GridConfig {
    /// Take geometry and equation of state from this dataset manifest.
    manifest: Option<PathBuf>,
    geometry: GeometryParams,
    eos: EosParams,
    boxes: Option<BoxConfig>,
    integrator: IntegratorConfig,
}

type Outcome = Result<Vec<PathBuf>, Error>;

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Error> {
    path.map_or_else(|| Ok(T::default()), read_config)
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::config("--config", format!("{} does not exist", path.display())),
        _ => Error::io(path, e),
    })?;
    serde_json::from_slice(&bytes).map_err(|source| Error::Json { path: path.to_path_buf(), source })
}

fn create_out(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn run_synth(a: SynthArgs) -> Outcome {
    let mut params: SynthParams = load_config(a.common.config.as_deref())?;
    if let Some(seed) = a.seed {
        params.seed = seed;
    }
    let manifest = generate_dataset(&params, a.n, &a.common.out)?;
    let mut out: Vec<PathBuf> = manifest.files.iter().map(|f| a.common.out.join(&f.path)).collect();
    out.push(a.common.out.join(oceangen::synth::NORM_STATS_FILE));
    out.push(a.common.out.join(oceangen::synth::MANIFEST_FILE));
    Ok(out)
}

fn run_train(a: TrainArgs) -> Outcome {
    let path = a
        .common
        .config
        .as_deref()
        .ok_or_else(|| Error::config("--config", "train needs a configuration naming the dataset manifest"))?;
    let mut cfg: TrainConfig = read_config(path)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(steps) = a.steps {
        cfg.total_steps = steps;
    }
    cfg.validate()?;
    create_out(&a.common.out)?;
    let mut progress = |row: &oceangen::train::LossRow| {
        if row.step % 50 == 0 || row.step == cfg.total_steps {
            eprintln!("step {:>6}  loss {:.5}  lr {:.3e}", row.step, row.loss, row.lr);
        }
    };
    let outcome = match &a.checkpoint {
        Some(ck) => resume(ck, &cfg, &a.common.out, &mut progress)?,
        None => train_until(&cfg, &a.common.out, cfg.total_steps, &mut progress)?,
    };
    Ok(vec![outcome.checkpoint, a.common.out.join(oceangen::train::LOSS_LOG)])
}

fn run_sample(a: SampleArgs) -> Outcome {
    let mut cfg: SampleConfig = load_config(a.common.config.as_deref())?;
    if let Some(n) = a.n {
        cfg.n = n;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(c) = a.constrained {
        cfg.constrained = c;
    }
    if let Some(t) = a.trace {
        cfg.trace = t;
    }
    if a.steps.is_some() {
        cfg.n_steps = a.steps;
    }
    let gen = Generator::open(&a.checkpoint, cfg.manifest.as_deref())?;
    let out = gen.generate_with(&cfg)?;
    let mut files = write_states(&out.states, &gen.geometry, &a.common.out)?;
    if cfg.trace {
        let path = a.common.out.join("trace.csv");
        let rows: Vec<_> = out.traces.iter().flat_map(|t| t.rows.clone()).collect();
        write_csv_file(&path, &rows)?;
        files.push(path);
    }
    Ok(files)
}

fn grid_for(cfg: &GridConfig, dims: oceangen::Dims) -> Result<(GridGeometry, EosParams), Error> {
    match &cfg.manifest {
        Some(m) => {
            let ds = Dataset::open(m)?;
            let geom = ds.geometry()?;
            if geom.dims != dims {
                return Err(Error::Mismatch(format!("state grid {dims} differs from dataset grid {}", geom.dims)));
            }
            Ok((geom, ds.manifest.params.eos.clone()))
        }
        None => Ok((GridGeometry::regular(dims, &cfg.geometry)?, cfg.eos.clone())),
    }
}

fn read_states(paths: &[PathBuf]) -> Result<Vec<OceanState<f32>>, Error> {
    paths.iter().map(|p| Ok(ostx::read_state(p)?.0)).collect()
}

fn run_eval(a: EvalArgs) -> Outcome {
    let cfg: GridConfig = load_config(a.common.config.as_deref())?;
    let states = read_states(&a.states)?;
    let mut rows = Vec::with_capacity(states.len());
    for (st, path) in states.iter().zip(&a.states) {
        let (geom, eos) = grid_for(&cfg, st.dims)?;
        let boxes = cfg.boxes.clone().unwrap_or_else(|| BoxConfig::default_for(st.dims));
        rows.push(evaluate(st, &geom, &eos, &boxes, &path.display().to_string())?);
    }
    create_out(&a.common.out)?;
    let path = a.common.out.join("metrics.csv");
    let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    write_metrics_csv(std::io::BufWriter::new(f), &rows)?;
    Ok(vec![path])
}

fn run_integrate(a: IntegrateArgs) -> Outcome {
    let mut cfg: GridConfig = load_config(a.common.config.as_deref())?;
    if let Some(y) = a.years {
        cfg.integrator.years = y;
    }
    let states = read_states(&a.states)?;
    let dims = states[0].dims;
    if states.iter().any(|s| s.dims != dims) {
        return Err(Error::Validation("all states must share one grid".into()));
    }
    let (geom, eos) = grid_for(&cfg, dims)?;
    let fallback = match &cfg.manifest {
        Some(m) => Climatology::from_states(&Dataset::open(m)?.load_states()?)?,
        None => Climatology::from_states(&states)?,
    };
    let integ = Integrator::new(cfg.integrator.clone(), geom, eos, Some(fallback))?;
    let rows = states
        .iter()
        .zip(&a.states)
        .map(|(s, p)| integ.integrate(&s.cast::<f64>(), &p.display().to_string()))
        .collect::<Result<Vec<_>, _>>()?;
    create_out(&a.common.out)?;
    let path = a.common.out.join("drift.csv");
    let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    write_drift_csv(std::io::BufWriter::new(f), &rows)?;
    Ok(vec![path])
}

fn run_compare(a: CompareArgs) -> Outcome {
    let mut cfg: CompareConfig = load_config(a.common.config.as_deref())?;
    if let Some(n) = a.n {
        cfg.n = n;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if a.steps.is_some() {
        cfg.n_steps = a.steps;
    }
    if let Some(y) = a.years {
        cfg.integrator.years = y;
    }
    let report = compare(&a.checkpoint, &cfg, &a.common.out)?;
    for row in report.summary() {
        eprintln!(
            "{:<14} density_error {:>7.3} ± {:<7.3} surf_var_T {:>7.3}  convective_events {:>9.1}",
            row.label, row.density_error_mean, row.density_error_std, row.surf_var_t_mean, row.convective_events_mean
        );
    }
    Ok(["summary.csv", "metrics.csv", "drift.csv"].iter().map(|f| a.common.out.join(f)).collect())
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numeric => 4,
    }
}

fn configure_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var("OSTX_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::config("OSTX_THREADS", format!("`{v}` is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::config("OSTX_THREADS", e.to_string()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = configure_threads().and_then(|_| match cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Train(a) => run_train(a),
        Command::Sample(a) => run_sample(a),
        Command::Eval(a) => run_eval(a),
        Command::Integrate(a) => run_integrate(a),
        Command::Compare(a) => run_compare(a),
    });
    match result {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}
