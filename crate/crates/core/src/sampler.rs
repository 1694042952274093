//! Rectified flow: the straight-line interpolant and its velocity target, the
//! Euler sampler with classifier-free guidance, and masked inpainting by
//! partial noising with per-step projection of the known panels.
//!
//! Time runs from `t = 1` (pure noise) to `t = 0` (data):
//! `z_t = (1 − t)·x + t·ε` and `dz/dt = ε − x`.

use serde::{Deserialize, Serialize};

use crate::canvas::{mask_region, Canvas, PanelLayout, PanelMask, CHANNELS};
use crate::dit::{forward_batch, forward_tokens, patchify, Bound, FieldInput, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::prompt::{null_prompt, TokenSeq};
use crate::synth::ImageSetRecord;
use crate::tensor::{Graph, Rng, Scalar, Tensor, Var};

pub const DEFAULT_STEPS: usize = 20;
pub const DEFAULT_GUIDANCE: f64 = 3.5;
/// Probability of training on the null prompt instead of the caption.
pub const PROMPT_DROPOUT: f64 = 0.1;
const PROJECTION_STREAM: u64 = 0x70_726f_6a;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            guidance: DEFAULT_GUIDANCE,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Invalid("sampling needs at least one step".into()));
        }
        if !(self.guidance.is_finite() && self.guidance >= 0.0) {
            return Err(Error::Invalid(format!(
                "guidance {} must be finite and >= 0",
                self.guidance
            )));
        }
        Ok(())
    }
}

/// `1, 1 − 1/n, …, 0`.
pub fn time_grid(steps: usize) -> Vec<f64> {
    scaled_grid(1.0, steps)
}

fn scaled_grid(t0: f64, n: usize) -> Vec<f64> {
    let mut g: Vec<f64> = (0..=n).map(|i| t0 * (1.0 - i as f64 / n as f64)).collect();
    g[n] = 0.0;
    g
}

fn same_shape<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `(1 − t)·x + t·ε`.
pub fn interpolate<S: Scalar>(x: &Tensor<S>, eps: &Tensor<S>, t: f64) -> Result<Tensor<S>> {
    same_shape(x, eps, "interpolate")?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Invalid(format!("t = {t} outside [0, 1]")));
    }
    let (a, b) = (S::from_f64(1.0 - t), S::from_f64(t));
    let data = x.data().iter().zip(eps.data()).map(|(&x, &e)| a * x + b * e).collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// `ε − x`.
pub fn velocity_target<S: Scalar>(x: &Tensor<S>, eps: &Tensor<S>) -> Result<Tensor<S>> {
    same_shape(x, eps, "velocity_target")?;
    let data = x.data().iter().zip(eps.data()).map(|(&x, &e)| e - x).collect();
    Tensor::new(x.shape().to_vec(), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Cond,
    Uncond,
}

/// Something that predicts `dz/dt`, with and without its conditioning.
pub trait VelocityField<S: Scalar = f32> {
    fn velocity(&self, z: &Tensor<S>, t: f64, branch: Branch) -> Result<Tensor<S>>;

    /// Both branches; fields that can batch them override this.
    fn velocity_pair(&self, z: &Tensor<S>, t: f64) -> Result<(Tensor<S>, Tensor<S>)> {
        Ok((self.velocity(z, t, Branch::Cond)?, self.velocity(z, t, Branch::Uncond)?))
    }
}

/// Velocities seen at one integration step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord<S: Scalar = f32> {
    pub t: f64,
    pub cond: Option<Tensor<S>>,
    pub uncond: Option<Tensor<S>>,
    pub guided: Tensor<S>,
}

/// `v_u + g·(v_c − v_u)`. At `g = 1` only the conditional branch is evaluated
/// and at `g = 0` only the unconditional one, so both collapses are exact.
pub fn guided_velocity<S: Scalar, F: VelocityField<S> + ?Sized>(
    field: &F,
    z: &Tensor<S>,
    t: f64,
    g: f64,
) -> Result<StepRecord<S>> {
    if g == 1.0 {
        let v = field.velocity(z, t, Branch::Cond)?;
        return Ok(StepRecord {
            t,
            cond: Some(v.clone()),
            uncond: None,
            guided: v,
        });
    }
    if g == 0.0 {
        let v = field.velocity(z, t, Branch::Uncond)?;
        return Ok(StepRecord {
            t,
            cond: None,
            uncond: Some(v.clone()),
            guided: v,
        });
    }
    let (c, u) = field.velocity_pair(z, t)?;
    same_shape(&c, &u, "guidance")?;
    let gs = S::from_f64(g);
    let data = c.data().iter().zip(u.data()).map(|(&c, &u)| u + gs * (c - u)).collect();
    Ok(StepRecord {
        t,
        guided: Tensor::new(c.shape().to_vec(), data)?,
        cond: Some(c),
        uncond: Some(u),
    })
}

/// Euler steps `z ← z − (t_i − t_{i+1})·v̂(z, t_i)` along `grid`.
///
/// `after_step(t_{i+1}, z)` runs after every step; `trace` collects the
/// per-step velocities.
pub fn euler_integrate<S, F>(
    field: &F,
    mut z: Tensor<S>,
    grid: &[f64],
    guidance: f64,
    mut trace: Option<&mut Vec<StepRecord<S>>>,
    mut after_step: impl FnMut(f64, &mut Tensor<S>) -> Result<()>,
) -> Result<Tensor<S>>
where
    S: Scalar,
    F: VelocityField<S> + ?Sized,
{
    for w in grid.windows(2) {
        let (t, next) = (w[0], w[1]);
        let rec = guided_velocity(field, &z, t, guidance)?;
        same_shape(&z, &rec.guided, "euler")?;
        let dt = S::from_f64(t - next);
        z.data_mut()
            .iter_mut()
            .zip(rec.guided.data())
            .for_each(|(z, &v)| *z = *z - dt * v);
        after_step(next, &mut z)?;
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(rec);
        }
    }
    Ok(z)
}

/// The model as a velocity field for one prompt.
pub struct DitField<'a> {
    pub params: &'a ModelParams,
    pub adapter: Option<&'a LoraAdapter>,
    pub text: &'a TokenSeq,
    null: TokenSeq,
}

impl<'a> DitField<'a> {
    pub fn new(params: &'a ModelParams, adapter: Option<&'a LoraAdapter>, text: &'a TokenSeq) -> Self {
        Self {
            params,
            adapter,
            text,
            null: null_prompt(),
        }
    }
}

impl VelocityField<f32> for DitField<'_> {
    fn velocity(&self, z: &Tensor<f32>, t: f64, branch: Branch) -> Result<Tensor<f32>> {
        let text = match branch {
            Branch::Cond => self.text,
            Branch::Uncond => &self.null,
        };
        Ok(forward_batch(self.params, self.adapter, &[FieldInput { z, t, text }])?.remove(0))
    }

    fn velocity_pair(&self, z: &Tensor<f32>, t: f64) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut v = forward_batch(
            self.params,
            self.adapter,
            &[
                FieldInput { z, t, text: self.text },
                FieldInput { z, t, text: &self.null },
            ],
        )?;
        let u = v.pop().expect("two outputs");
        Ok((v.pop().expect("two outputs"), u))
    }
}

/// Draws `z₁ ~ N(0, I)` from `Rng::new(cfg.seed)`, integrates to `t = 0`
/// and clamps into `[-1, 1]`.
pub fn sample_with_field<F: VelocityField<f32> + ?Sized>(
    field: &F,
    height: usize,
    width: usize,
    cfg: &SamplerConfig,
) -> Result<Canvas> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let z = rng.normal_tensor(vec![CHANNELS, height, width]);
    let z = euler_integrate(field, z, &time_grid(cfg.steps), cfg.guidance, None, |_, _| Ok(()))?;
    Canvas::from_clamped(height, width, z.into_data())
}

/// Generates a whole canvas for `text` on `layout`.
pub fn sample(
    params: &ModelParams,
    adapter: Option<&LoraAdapter>,
    text: &TokenSeq,
    cfg: &SamplerConfig,
    layout: &PanelLayout,
) -> Result<Canvas> {
    sample_with_field(
        &DitField::new(params, adapter, text),
        layout.height(),
        layout.width(),
        cfg,
    )
}

/// A reference canvas, the panels to regenerate, and the noising strength `t₀`.
#[derive(Clone, Debug, PartialEq)]
pub struct InpaintSpec {
    pub reference: Canvas,
    pub mask: PanelMask,
    pub strength: f64,
}

impl InpaintSpec {
    pub fn new(reference: Canvas, mask: PanelMask) -> Self {
        Self {
            reference,
            mask,
            strength: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mask.is_empty() {
            return Err(Error::Invalid("inpainting mask selects no panel".into()));
        }
        let l = self.mask.layout();
        if (self.reference.height(), self.reference.width()) != (l.height(), l.width()) {
            return Err(Error::Dimension(format!(
                "reference {}x{} does not match layout {}",
                self.reference.height(),
                self.reference.width(),
                l
            )));
        }
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(Error::Invalid(format!("strength {} outside [0, 1]", self.strength)));
        }
        Ok(())
    }
}

/// Masked inpainting on any velocity field.
///
/// `ε` is the first draw of `Rng::new(cfg.seed)`, so with every panel masked
/// and `t₀ = 1` this is exactly [`sample_with_field`]. Integration covers
/// `t₀ → 0` in `⌈steps·t₀⌉` uniform steps. After each step the known pixels
/// are replaced by the reference noised to the new time with fresh noise, and
/// the result carries the reference's known pixels exactly.
pub fn sdedit_with_field<F: VelocityField<f32> + ?Sized>(
    field: &F,
    spec: &InpaintSpec,
    cfg: &SamplerConfig,
) -> Result<Canvas> {
    cfg.validate()?;
    spec.validate()?;
    let (h, w) = (spec.reference.height(), spec.reference.width());
    let mut rng = Rng::new(cfg.seed);
    let eps: Tensor<f32> = rng.normal_tensor(vec![CHANNELS, h, w]);
    let t0 = spec.strength;
    if t0 == 0.0 {
        return Ok(spec.reference.clone());
    }
    let n = ((cfg.steps as f64 * t0).ceil() as usize).max(1);
    let reference = spec.reference.pixels();
    let known: Vec<usize> = mask_region(&spec.mask)
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| (!m).then_some(i))
        .collect();
    let mut proj = rng.fork(PROJECTION_STREAM);
    let z = interpolate(reference, &eps, t0)?;
    let z = euler_integrate(field, z, &scaled_grid(t0, n), cfg.guidance, None, |t, z| {
        if known.is_empty() {
            return Ok(());
        }
        let e: Tensor<f32> = proj.normal_tensor(vec![CHANNELS, h, w]);
        let target = interpolate(reference, &e, t)?;
        let zd = z.data_mut();
        for &i in &known {
            zd[i] = target.data()[i];
        }
        Ok(())
    })?;
    let mut out = z.into_data();
    for v in out.iter_mut() {
        *v = if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
    }
    for &i in &known {
        out[i] = reference.data()[i];
    }
    Canvas::new(h, w, out)
}

pub fn sdedit_inpaint(
    params: &ModelParams,
    adapter: Option<&LoraAdapter>,
    text: &TokenSeq,
    spec: &InpaintSpec,
    cfg: &SamplerConfig,
) -> Result<Canvas> {
    sdedit_with_field(&DitField::new(params, adapter, text), spec, cfg)
}

/// The random quantities of one flow-matching example, drawn in the order
/// `t`, prompt dropout, `ε`.
#[derive(Clone, Debug, PartialEq)]
pub struct FmDraw {
    pub t: f64,
    pub dropped: bool,
    pub eps: Tensor<f32>,
}

pub fn draw_fm(rng: &mut Rng, shape: &[usize]) -> FmDraw {
    let t = rng.uniform();
    let dropped = rng.bernoulli(PROMPT_DROPOUT);
    FmDraw {
        t,
        dropped,
        eps: rng.normal_tensor(shape.to_vec()),
    }
}

/// Mean squared error between predicted and target velocity over a batch of
/// composed canvases, built on `g`. All canvases must share one size.
pub fn fm_loss_graph<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    cfg: &ModelConfig,
    batch: &[(&Tensor<f32>, &TokenSeq)],
    rng: &mut Rng,
) -> Result<Var> {
    let null = null_prompt();
    let mut zs = Vec::with_capacity(batch.len());
    let mut targets = Vec::new();
    let mut meta = Vec::with_capacity(batch.len());
    for &(x, text) in batch {
        let d = draw_fm(rng, x.shape());
        zs.push(interpolate(x, &d.eps, d.t)?);
        targets.extend(
            patchify(&velocity_target(x, &d.eps)?, cfg.patch)?
                .data()
                .iter()
                .map(|&v| S::from_f64(v as f64)),
        );
        meta.push((d.t, if d.dropped { &null } else { text }));
    }
    let inputs: Vec<FieldInput> = zs
        .iter()
        .zip(&meta)
        .map(|(z, &(t, text))| FieldInput { z, t, text })
        .collect();
    let pred = forward_tokens(g, bound, cfg, &inputs)?;
    let shape = g.value(pred).shape().to_vec();
    let target = g.constant(Tensor::new(shape, targets)?);
    g.mse(pred, target)
}

/// Flow-matching loss of one image set (no gradients).
pub fn fm_loss(
    params: &ModelParams,
    adapter: Option<&LoraAdapter>,
    record: &ImageSetRecord,
    rng: &mut Rng,
) -> Result<Tensor<f32>> {
    let canvas = record.canvas()?;
    let text = record.tokens()?;
    let mut g = Graph::<f32>::new();
    let bound = Bound::new(&mut g, params, false, adapter.map(|a| (a, false)))?;
    let l = fm_loss_graph(&mut g, &bound, &params.config, &[(canvas.pixels(), &text)], rng)?;
    Ok(g.take_value(l))
}
