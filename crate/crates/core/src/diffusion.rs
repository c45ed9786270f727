//! Denoising diffusion: the cosine noise schedule, forward noising, the
//! noise-prediction loss, and (optionally guided) ancestral sampling.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraint::{self, ConstraintConfig};
use crate::error::{Error, Result};
use crate::grid::{denormalize_state, Dims, NormStats, OceanState};
use crate::net::Denoiser;
use crate::rng::{stream, Domain};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const MAX_BETA: f64 = 0.999;

/// Per-step coefficients, 1-indexed by diffusion step `s` in `1..=S`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    n_steps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    gamma: Vec<f64>,
    sigma: Vec<f64>,
}

/// Cosine ("squared cosine, capped") schedule with `n_steps` steps.
pub fn build_schedule(n_steps: usize) -> Result<NoiseSchedule> {
    if n_steps < 2 {
        return Err(Error::config("S", format!("needs at least 2 diffusion steps, got {n_steps}")));
    }
    let total = n_steps as f64;
    let f = |u: f64| (((u / total + 0.008) / 1.008) * std::f64::consts::FRAC_PI_2).cos().powi(2);
    let mut beta = Vec::with_capacity(n_steps);
    let mut alpha = Vec::with_capacity(n_steps);
    let mut alpha_bar = Vec::with_capacity(n_steps);
    let mut gamma = Vec::with_capacity(n_steps);
    let mut sigma = Vec::with_capacity(n_steps);
    let mut prev_bar = 1.0;
    for s in 1..=n_steps {
        let b = (1.0 - f(s as f64) / f(s as f64 - 1.0)).min(MAX_BETA);
        let a = 1.0 - b;
        let bar = prev_bar * a;
        beta.push(b);
        alpha.push(a);
        alpha_bar.push(bar);
        gamma.push((1.0 - a) / (1.0 - bar).sqrt());
        sigma.push(if s == 1 { 0.0 } else { (b * (1.0 - prev_bar) / (1.0 - bar)).sqrt() });
        prev_bar = bar;
    }
    Ok(NoiseSchedule { n_steps, beta, alpha, alpha_bar, gamma, sigma })
}

impl NoiseSchedule {
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }
    pub fn beta(&self, s: usize) -> f64 {
        self.beta[s - 1]
    }
    pub fn alpha(&self, s: usize) -> f64 {
        self.alpha[s - 1]
    }
    /// `alpha_bar(0)` is 1.
    pub fn alpha_bar(&self, s: usize) -> f64 {
        if s == 0 {
            1.0
        } else {
            self.alpha_bar[s - 1]
        }
    }
    pub fn gamma(&self, s: usize) -> f64 {
        self.gamma[s - 1]
    }
    pub fn sigma(&self, s: usize) -> f64 {
        self.sigma[s - 1]
    }

    fn check_step(&self, s: usize) -> Result<()> {
        if s == 0 || s > self.n_steps {
            return Err(Error::Validation(format!(
                "diffusion step {s} outside 1..={}",
                self.n_steps
            )));
        }
        Ok(())
    }
}

pub fn forward_noise<R: Real>(
    x0: &Tensor<R>,
    s: usize,
    eps: &Tensor<R>,
    sched: &NoiseSchedule,
) -> Result<Tensor<R>> {
    sched.check_step(s)?;
    if !x0.same_shape(eps) {
        return Err(Error::Validation(format!(
            "noise shape {:?} differs from state shape {:?}",
            eps.shape(),
            x0.shape()
        )));
    }
    let a = R::of(sched.alpha_bar(s).sqrt());
    let b = R::of((1.0 - sched.alpha_bar(s)).sqrt());
    let data = x0.data.iter().zip(&eps.data).map(|(&x, &e)| a * x + b * e).collect();
    Ok(Tensor::from_vec(x0.c, x0.w, x0.h, data))
}

pub fn standard_normal<R: Real>(c: usize, w: usize, h: usize, rng: &mut impl Rng) -> Tensor<R> {
    let data = (0..c * w * h)
        .map(|_| R::of(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::from_vec(c, w, h, data)
}

/// Anything that predicts the noise in `x_s`.
pub trait EpsModel<R: Real>: Sync {
    fn predict(&self, x: &Tensor<R>, s: usize) -> Result<Tensor<R>>;

    /// Prediction together with the parameter gradient of `<upstream(pred), pred>`.
    /// Models without parameters return an empty gradient.
    fn predict_with_grad(
        &self,
        x: &Tensor<R>,
        s: usize,
        upstream: &dyn Fn(&Tensor<R>) -> Tensor<R>,
    ) -> Result<(Tensor<R>, Vec<R>)> {
        let _ = upstream;
        Ok((self.predict(x, s)?, Vec::new()))
    }
}

impl<R: Real> EpsModel<R> for Denoiser<R> {
    fn predict(&self, x: &Tensor<R>, s: usize) -> Result<Tensor<R>> {
        self.forward(x, s)
    }

    fn predict_with_grad(
        &self,
        x: &Tensor<R>,
        s: usize,
        upstream: &dyn Fn(&Tensor<R>) -> Tensor<R>,
    ) -> Result<(Tensor<R>, Vec<R>)> {
        let (y, tape) = self.forward_tape(x, s)?;
        let dy = upstream(&y);
        let g = self.backward_tape(&tape, &dy);
        Ok((y, g))
    }
}

/// The `(s, eps)` pair drawn for one batch element.
#[derive(Clone, Debug)]
pub struct NoiseDraw<R> {
    pub s: usize,
    pub eps: Tensor<R>,
}

/// Draws `s` uniform on `1..=S` and a standard normal `eps` for each element, in batch order.
pub fn draw_noise<R: Real>(
    batch: &[Tensor<R>],
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Vec<NoiseDraw<R>> {
    batch
        .iter()
        .map(|x| {
            let s = rng.gen_range(1..=sched.n_steps);
            NoiseDraw { s, eps: standard_normal(x.c, x.w, x.h, rng) }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct LossOutput<R> {
    pub loss: f64,
    pub grads: Vec<R>,
}

/// Mean squared noise-prediction error over the batch with the given draws.
/// Per-element gradients are computed in parallel and summed in batch order.
pub fn loss_with_draws<R: Real, M: EpsModel<R>>(
    model: &M,
    batch: &[Tensor<R>],
    draws: &[NoiseDraw<R>],
    sched: &NoiseSchedule,
) -> Result<LossOutput<R>> {
    if batch.is_empty() {
        return Err(Error::Validation("empty training batch".into()));
    }
    if draws.len() != batch.len() {
        return Err(Error::Validation("one noise draw per batch element required".into()));
    }
    let count: usize = batch.iter().map(|x| x.len()).sum();
    let scale = R::of(2.0 / count as f64);
    let parts: Vec<Result<(f64, Vec<R>)>> = batch
        .par_iter()
        .zip(draws)
        .map(|(x0, d)| {
            let xs = forward_noise(x0, d.s, &d.eps, sched)?;
            let upstream = |pred: &Tensor<R>| {
                let data = pred.data.iter().zip(&d.eps.data).map(|(&p, &e)| scale * (p - e)).collect();
                Tensor::from_vec(pred.c, pred.w, pred.h, data)
            };
            let (pred, g) = model.predict_with_grad(&xs, d.s, &upstream)?;
            let sq: f64 = pred
                .data
                .iter()
                .zip(&d.eps.data)
                .map(|(&p, &e)| (p - e).f64().powi(2))
                .sum();
            Ok((sq, g))
        })
        .collect();
    let mut total = 0.0;
    let mut grads: Vec<R> = Vec::new();
    for part in parts {
        let (sq, g) = part?;
        total += sq;
        if grads.is_empty() {
            grads = g;
        } else {
            for (a, b) in grads.iter_mut().zip(&g) {
                *a += *b;
            }
        }
    }
    let loss = total / count as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("training loss is {loss}")));
    }
    Ok(LossOutput { loss, grads })
}

pub fn training_loss<R: Real, M: EpsModel<R>>(
    model: &M,
    batch: &[Tensor<R>],
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<LossOutput<R>> {
    let draws = draw_noise(batch, sched, rng);
    loss_with_draws(model, batch, &draws, sched)
}

/// Horizontal region of the tensor that holds real ocean cells; padding
/// columns and rows beyond it are ignored by the guidance term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub w: usize,
    pub h: usize,
}

fn guidance_gradient<R: Real>(x: &Tensor<R>, region: Region, cfg: &ConstraintConfig) -> Result<Tensor<R>> {
    if region.w == x.w && region.h == x.h {
        return constraint::constraint_gradient(x, cfg);
    }
    let g = constraint::constraint_gradient(&x.crop(region.w, region.h)?, cfg)?;
    let mut out = Tensor::zeros(x.c, x.w, x.h);
    for c in 0..x.c {
        for i in 0..region.w {
            out.channel_mut(c)[i * x.h..i * x.h + region.h]
                .copy_from_slice(&g.channel(c)[i * region.h..(i + 1) * region.h]);
        }
    }
    Ok(out)
}

fn region_value<R: Real>(x: &Tensor<R>, region: Region, cfg: &ConstraintConfig) -> Result<f64> {
    let v = if region.w == x.w && region.h == x.h {
        constraint::constraint_value(x, cfg)?
    } else {
        constraint::constraint_value(&x.crop(region.w, region.h)?, cfg)?
    };
    Ok(v.f64())
}

/// Guidance applied during a reverse step.
#[derive(Clone, Copy, Debug)]
pub struct Guidance<'a> {
    pub cfg: &'a ConstraintConfig,
    pub region: Region,
}

/// `x_{s-1} = alpha^{-1/2} (x_s - gamma eps_theta) - kappa(s) grad C(x_s) + sigma z`.
///
/// `z` is drawn from `rng` only when `sigma(s) > 0`, in the same way with or
/// without guidance, so guided and plain chains can share a stream.
pub fn guided_reverse_step<R: Real, M: EpsModel<R> + ?Sized>(
    x: &Tensor<R>,
    s: usize,
    model: &M,
    sched: &NoiseSchedule,
    guidance: Option<Guidance<'_>>,
    rng: &mut impl Rng,
) -> Result<Tensor<R>> {
    sched.check_step(s)?;
    let eps = model.predict(x, s)?;
    if !eps.same_shape(x) {
        return Err(Error::Validation("noise prediction changed the tensor shape".into()));
    }
    let inv_sqrt_a = R::of(1.0 / sched.alpha(s).sqrt());
    let gamma = R::of(sched.gamma(s));
    let mut data: Vec<R> = x
        .data
        .iter()
        .zip(&eps.data)
        .map(|(&v, &e)| inv_sqrt_a * (v - gamma * e))
        .collect();
    if let Some(g) = guidance {
        let k = R::of(constraint::kappa(s, sched.n_steps, g.cfg));
        let grad = guidance_gradient(x, g.region, g.cfg)?;
        for (d, &gv) in data.iter_mut().zip(&grad.data) {
            *d -= k * gv;
        }
    }
    let sigma = sched.sigma(s);
    if sigma > 0.0 {
        let sg = R::of(sigma);
        for d in data.iter_mut() {
            *d += sg * R::of(rng.sample::<f64, _>(StandardNormal));
        }
    }
    Ok(Tensor::from_vec(x.c, x.w, x.h, data))
}

pub fn reverse_step<R: Real, M: EpsModel<R> + ?Sized>(
    x: &Tensor<R>,
    s: usize,
    model: &M,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Tensor<R>> {
    guided_reverse_step(x, s, model, sched, None, rng)
}

/// One row of a sampling trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub sample: usize,
    pub s: usize,
    pub constraint: f64,
    pub kappa: f64,
    pub deviation: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleTrace {
    /// Ordered from `s = S` down to `s = 1`.
    pub rows: Vec<TraceRow>,
}

impl SampleTrace {
    pub fn at_step(&self, s: usize) -> Option<&TraceRow> {
        self.rows.iter().find(|r| r.s == s)
    }
}

pub fn write_trace_csv<W: std::io::Write>(out: W, traces: &[SampleTrace]) -> Result<()> {
    let rows: Vec<&TraceRow> = traces.iter().flat_map(|t| &t.rows).collect();
    crate::physics::write_csv(out, &rows)
}

#[derive(Clone, Debug)]
pub struct SampleRequest<'a> {
    /// Grid of the generated states (may be smaller than the network's padded grid).
    pub dims: Dims,
    pub norm_stats: &'a NormStats,
    /// `Some` enables guidance; its walls also select the fix-up rows.
    pub constraint: Option<&'a ConstraintConfig>,
    pub n: usize,
    pub seed: u64,
    pub trace: bool,
    /// Network input grid; equal to `dims` horizontally when no padding is used.
    pub padded_w: usize,
    pub padded_h: usize,
}

#[derive(Clone, Debug)]
pub struct SampleOutput<R> {
    pub states: Vec<OceanState<R>>,
    pub traces: Vec<SampleTrace>,
}

/// Generates one state from its own stream `(seed, sample index)`.
pub fn sample_one<R: Real, M: EpsModel<R> + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    req: &SampleRequest<'_>,
    index: usize,
) -> Result<(OceanState<R>, SampleTrace)> {
    let d = req.dims;
    if req.padded_w < d.w || req.padded_h < d.h {
        return Err(Error::Validation(format!(
            "padded grid {}x{} is smaller than {}",
            req.padded_w, req.padded_h, d
        )));
    }
    let region = Region { w: d.w, h: d.h };
    let default_cfg = ConstraintConfig::default();
    let trace_cfg = req.constraint.unwrap_or(&default_cfg);
    let guidance = req.constraint.map(|cfg| Guidance { cfg, region });
    let mut rng = stream(req.seed, Domain::Sample, index as u64);
    let mut x: Tensor<R> = standard_normal(2 * d.z, req.padded_w, req.padded_h, &mut rng);
    let mut trace = SampleTrace::default();
    for s in (1..=sched.n_steps).rev() {
        if req.trace {
            let c = region_value(&x, region, trace_cfg)?;
            let kappa = match req.constraint {
                Some(cfg) => constraint::kappa(s, sched.n_steps, cfg),
                None => 0.0,
            };
            trace.rows.push(TraceRow { sample: index, s, constraint: c, kappa, deviation: c.sqrt() });
        }
        x = guided_reverse_step(&x, s, model, sched, guidance, &mut rng)?;
        if !x.all_finite() {
            return Err(Error::Numeric(format!(
                "sample {index}: non-finite state after reverse step s={s}"
            )));
        }
    }
    let cropped = x.crop(d.w, d.h)?;
    let normalized = OceanState::from_tensor(&cropped, true)?;
    let fixed = constraint::boundary_fixup(&normalized, trace_cfg.walls)?;
    let state = denormalize_state(&fixed, req.norm_stats)
        .map_err(|e| Error::Numeric(format!("sample {index}: generated state is not physical: {e}")))?;
    Ok((state, trace))
}

/// Generates `req.n` states in parallel; results are independent of thread count.
pub fn sample<R: Real, M: EpsModel<R>>(
    model: &M,
    sched: &NoiseSchedule,
    req: &SampleRequest<'_>,
) -> Result<SampleOutput<R>> {
    if let Some(c) = req.constraint {
        c.validate()?;
    }
    if req.norm_stats.levels() != req.dims.z {
        return Err(Error::Mismatch(format!(
            "normalization statistics cover {} levels, grid has {}",
            req.norm_stats.levels(),
            req.dims.z
        )));
    }
    let results: Vec<Result<(OceanState<R>, SampleTrace)>> = (0..req.n)
        .into_par_iter()
        .map(|i| sample_one(model, sched, req, i))
        .collect();
    let mut out = SampleOutput { states: Vec::with_capacity(req.n), traces: Vec::new() };
    for r in results {
        let (state, trace) = r?;
        out.states.push(state);
        if req.trace {
            out.traces.push(trace);
        }
    }
    Ok(out)
}
