//! Flow matching on the linear interpolant `x_t = (1 - t) x0 + t eps`: the
//! velocity regression loss, classifier-free guidance and the Euler sampler
//! that integrates the probability-flow ODE from noise (`t = 1`) to data.

use std::sync::Arc;

use crate::dit::{DiT, DitInput};
use crate::error::{Error, Result};
use crate::featurizer::LatentGrid;
use crate::nn::Session;
use crate::numerics::{Graph, Rng, Tensor, Unary, Var};
use crate::parallel::{map_indexed, Exec};
use crate::textcond::NULL_CAPTION;

/// `(1 - t) x0 + t eps`, exact at both endpoints.
pub fn interpolate(x0: &Tensor<f32>, eps: &Tensor<f32>, t: f64) -> Result<Tensor<f32>> {
    x0.expect_same_shape(eps, "interpolate")?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(
            "flow",
            format!("interpolation time {t} is outside [0, 1]"),
        ));
    }
    if t == 0.0 {
        return Ok(x0.clone());
    }
    if t == 1.0 {
        return Ok(eps.clone());
    }
    let (a, b) = ((1.0 - t) as f32, t as f32);
    x0.zip_map(eps, "interpolate", |x, e| a * x + b * e)
}

/// `v_uncond + scale (v_cond - v_uncond)`.
pub fn cfg_combine(
    v_cond: &Tensor<f32>,
    v_uncond: &Tensor<f32>,
    scale: f64,
) -> Result<Tensor<f32>> {
    let s = scale as f32;
    v_cond.zip_map(v_uncond, "cfg_combine", |c, u| u + s * (c - u))
}

/// Loss weighting `lambda(t)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Weighting {
    Constant(f64),
}

impl Weighting {
    pub fn at(&self, _t: f64) -> f64 {
        match *self {
            Weighting::Constant(c) => c,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TSampler {
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossNorm {
    /// `||v - target||^2`.
    Squared,
    /// `||v - target||`.
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda: Weighting,
    pub t_sampler: TSampler,
    pub norm: LossNorm,
    /// Probability of replacing a caption with the null caption.
    pub p_drop: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: Weighting::Constant(1.0),
            t_sampler: TSampler::Uniform,
            norm: LossNorm::Squared,
            p_drop: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let Weighting::Constant(c) = self.lambda;
        if c.is_nan() || c <= 0.0 {
            return Err(Error::invalid(
                "flow",
                format!("loss weight must be positive, got {c}"),
            ));
        }
        if !(0.0..=1.0).contains(&self.p_drop) {
            return Err(Error::invalid(
                "flow",
                format!("caption dropout {} is not a probability", self.p_drop),
            ));
        }
        Ok(())
    }
}

/// One training example: a normalized latent and its caption tokens.
#[derive(Clone, Copy, Debug)]
pub struct FmExample<'a> {
    pub x0: &'a LatentGrid,
    pub text: &'a [u32],
}

/// Random quantities of one loss evaluation for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FmDraw {
    pub t: f64,
    pub eps: Tensor<f32>,
    pub drop_caption: bool,
}

/// Draws `t`, then `eps`, then the dropout coin, sample by sample.
pub fn draw_batch(batch: &[FmExample], cfg: &LossConfig, rng: &mut Rng) -> Result<Vec<FmDraw>> {
    batch
        .iter()
        .map(|ex| {
            let t = match cfg.t_sampler {
                TSampler::Uniform => rng.uniform(),
            };
            let eps = Tensor::new(
                ex.x0.data.shape().to_vec(),
                rng.normal_vec(ex.x0.data.numel()),
            )?;
            let drop_caption = rng.uniform() < cfg.p_drop;
            Ok(FmDraw {
                t,
                eps,
                drop_caption,
            })
        })
        .collect()
}

/// One sample handed to a [`FlowModel`].
#[derive(Clone, Copy, Debug)]
pub struct FlowItem<'a> {
    pub rows: usize,
    pub cols: usize,
    pub text: &'a [u32],
    pub t: f64,
}

/// A differentiable velocity predictor over packed latent tokens.
pub trait FlowModel {
    /// `xt` is `[sum rows * cols, d]` in item order; the result has the same shape.
    fn predict(&self, g: &mut Graph<f32>, xt: Var, items: &[FlowItem]) -> Result<Var>;
}

impl FlowModel for DiT {
    fn predict(&self, g: &mut Graph<f32>, xt: Var, items: &[FlowItem]) -> Result<Var> {
        let inputs: Vec<DitInput> = items
            .iter()
            .map(|it| DitInput::new(it.text, it.rows, it.cols, it.t))
            .collect();
        let mut s = Session::new(g, self.store());
        self.forward(&mut s, xt, &inputs)
    }
}

const L2_EPS: f32 = 1e-24;

/// Batch mean of `lambda(t_i) ||v(x_t, t) - (eps - x0)||` (squared by default)
/// for the given draws. Records the graph in `g` and returns the scalar loss.
pub fn fm_loss_with_draws(
    model: &impl FlowModel,
    g: &mut Graph<f32>,
    batch: &[FmExample],
    draws: &[FmDraw],
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::invalid("flow", "empty training batch"));
    }
    if batch.len() != draws.len() {
        return Err(Error::invalid(
            "flow",
            format!("{} examples but {} draws", batch.len(), draws.len()),
        ));
    }
    let d = batch[0].x0.d;
    let mut xt = Vec::new();
    let mut target = Vec::new();
    let mut segments = Vec::with_capacity(batch.len());
    let mut weights = Vec::with_capacity(batch.len());
    for (i, (ex, dr)) in batch.iter().zip(draws).enumerate() {
        if ex.x0.d != d {
            return Err(Error::invalid(
                "flow",
                format!("sample {i} has {} channels, expected {d}", ex.x0.d),
            ));
        }
        if let Some(bad) = ex.x0.values().iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(
                "flow",
                format!("sample {i} has a non-finite latent value at {bad}"),
            ));
        }
        xt.extend(interpolate(&ex.x0.data, &dr.eps, dr.t)?.into_data());
        target.extend(dr.eps.data().iter().zip(ex.x0.values()).map(|(e, x)| e - x));
        segments.push((segments.last().map_or(0, |&(s, l)| s + l), ex.x0.tokens()));
        weights.push(cfg.lambda.at(dr.t) as f32 / batch.len() as f32);
    }
    let n: usize = batch.iter().map(|ex| ex.x0.tokens()).sum();
    let items: Vec<FlowItem> = batch
        .iter()
        .zip(draws)
        .map(|(ex, dr)| FlowItem {
            rows: ex.x0.rows,
            cols: ex.x0.cols,
            text: if dr.drop_caption {
                NULL_CAPTION
            } else {
                ex.text
            },
            t: dr.t,
        })
        .collect();
    let xv = g.constant(Tensor::new(vec![n, d], xt)?)?;
    let v = model
        .predict(g, xv, &items)
        .map_err(|e| Error::invalid("flow", format!("velocity prediction failed: {e}")))?;
    let tv = g.constant(Tensor::new(vec![n, d], target)?)?;
    let diff = g.sub(v, tv)?;
    let sq = g.square(diff)?;
    let per_sample = g.segment_sum(sq, Arc::new(segments))?;
    if let Some(i) = g
        .value(per_sample)
        .data()
        .iter()
        .position(|v| !v.is_finite())
    {
        return Err(Error::invalid(
            "flow",
            format!("non-finite loss for sample {i}"),
        ));
    }
    let per_sample = match cfg.norm {
        LossNorm::Squared => per_sample,
        LossNorm::L2 => {
            let shifted = g.add_scalar(per_sample, L2_EPS)?;
            g.unary(shifted, Unary::Sqrt)?
        }
    };
    let w = g.constant(Tensor::new(vec![batch.len()], weights)?)?;
    let weighted = g.mul(per_sample, w)?;
    g.sum(weighted)
}

/// Draws fresh `t`, `eps` and caption dropout from `rng`, then evaluates the loss.
pub fn fm_loss(
    model: &impl FlowModel,
    g: &mut Graph<f32>,
    batch: &[FmExample],
    rng: &mut Rng,
    cfg: &LossConfig,
) -> Result<Var> {
    let draws = draw_batch(batch, cfg, rng)?;
    fm_loss_with_draws(model, g, batch, &draws, cfg)
}

/// A batched velocity field queried by the sampler.
pub trait VelocityField: Sync {
    fn velocity_batch(
        &self,
        x: &[LatentGrid],
        text: &[&[u32]],
        t: &[f64],
    ) -> Result<Vec<LatentGrid>>;
}

impl VelocityField for DiT {
    fn velocity_batch(
        &self,
        x: &[LatentGrid],
        text: &[&[u32]],
        t: &[f64],
    ) -> Result<Vec<LatentGrid>> {
        DiT::velocity_batch(self, x, text, t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    /// Caption of the unconditional branch.
    pub null_caption: Vec<u32>,
    /// Samples integrated together per model call.
    pub chunk: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            cfg_scale: 4.0,
            null_caption: NULL_CAPTION.to_vec(),
            chunk: 8,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("flow", "sampler needs at least one step"));
        }
        if self.cfg_scale.is_nan() || self.cfg_scale < 0.0 {
            return Err(Error::invalid(
                "flow",
                format!("guidance scale {} is negative", self.cfg_scale),
            ));
        }
        if self.chunk == 0 {
            return Err(Error::invalid("flow", "sampling chunk must be positive"));
        }
        Ok(())
    }
}

/// Euler integration from `t = 1` to `t = 0` of one starting point per caption.
/// Sample `i` draws its starting noise from `rng.split(i)`, so results do not
/// depend on chunking or on the execution mode.
pub fn euler_sample(
    model: &impl VelocityField,
    captions: &[&[u32]],
    shape: (usize, usize, usize),
    cfg: &SampleConfig,
    rng: &Rng,
) -> Result<Vec<LatentGrid>> {
    let (rows, cols, d) = shape;
    let starts = (0..captions.len())
        .map(|i| {
            LatentGrid::new(
                rows,
                cols,
                d,
                rng.split(i as u64).normal_vec(rows * cols * d),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    integrate(model, captions, starts, cfg)
}

/// Euler integration from the given `x1` states.
pub fn integrate(
    model: &impl VelocityField,
    captions: &[&[u32]],
    starts: Vec<LatentGrid>,
    cfg: &SampleConfig,
) -> Result<Vec<LatentGrid>> {
    cfg.validate()?;
    if captions.len() != starts.len() {
        return Err(Error::invalid(
            "flow",
            "one caption per starting point is required",
        ));
    }
    let n_chunks = captions.len().div_ceil(cfg.chunk);
    let results = map_indexed(Exec::current(), n_chunks, |c| {
        let lo = c * cfg.chunk;
        let hi = (lo + cfg.chunk).min(captions.len());
        integrate_chunk(model, &captions[lo..hi], starts[lo..hi].to_vec(), cfg)
    });
    let mut out = Vec::with_capacity(captions.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

fn integrate_chunk(
    model: &impl VelocityField,
    captions: &[&[u32]],
    mut x: Vec<LatentGrid>,
    cfg: &SampleConfig,
) -> Result<Vec<LatentGrid>> {
    let n = x.len();
    let dt = 1.0 / cfg.steps as f64;
    let null: &[u32] = &cfg.null_caption;
    let use_cond = cfg.cfg_scale != 0.0;
    let use_uncond = cfg.cfg_scale != 1.0;
    for step in 0..cfg.steps {
        let t = 1.0 - step as f64 * dt;
        let mut xs = Vec::with_capacity(2 * n);
        let mut texts: Vec<&[u32]> = Vec::with_capacity(2 * n);
        if use_cond {
            xs.extend(x.iter().cloned());
            texts.extend(captions.iter().copied());
        }
        if use_uncond {
            xs.extend(x.iter().cloned());
            texts.extend(std::iter::repeat_n(null, n));
        }
        let ts = vec![t; xs.len()];
        let v = model
            .velocity_batch(&xs, &texts, &ts)
            .map_err(|e| Error::invalid("flow", format!("velocity failed at step {step}: {e}")))?;
        for i in 0..n {
            let guided = match (use_cond, use_uncond) {
                (true, true) => cfg_combine(&v[i].data, &v[n + i].data, cfg.cfg_scale)?,
                _ => v[i].data.clone(),
            };
            let dt32 = dt as f32;
            let next = x[i].data.zip_map(&guided, "euler", |a, b| a - dt32 * b)?;
            if next.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(
                    "flow",
                    format!("non-finite state at step {step}"),
                ));
            }
            x[i].data = next;
        }
    }
    Ok(x)
}
