//! A small diffusion transformer over the panel canvas.
//!
//! Image patches of the whole canvas and the merged prompt's tokens form a
//! single sequence that runs through full bidirectional self-attention. The
//! timestep enters through adaLN shift/scale/gate around every attention and
//! MLP branch. The head reads image positions only.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{adapted_matmul, LoraAdapter};
use crate::prompt::{TokenSeq, Vocabulary, TEXT_LEN};
use crate::tensor::ops::LN_EPS;
use crate::tensor::{Graph, Rng, Scalar, Tensor, Var};

const CHANNELS: usize = 3;
const INIT_STD: f64 = 0.02;

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub patch: usize,
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub text_len: usize,
    pub mlp_ratio: usize,
    /// Largest canvas the positional table covers.
    pub max_height: usize,
    pub max_width: usize,
    pub vocab: usize,
    /// Drop text positions after `[EOS]` instead of masking them. Both give the
    /// same result; truncation is cheaper.
    #[serde(default = "yes")]
    pub truncate_text: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch: 4,
            d_model: 128,
            heads: 4,
            blocks: 6,
            text_len: TEXT_LEN,
            mlp_ratio: 4,
            max_height: 64,
            max_width: 64,
            vocab: Vocabulary::get().len(),
            truncate_text: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if self.d_model % 2 != 0 {
            return bad("d_model must be even".into());
        }
        if self.patch == 0 || self.max_height % self.patch != 0 || self.max_width % self.patch != 0 {
            return bad(format!(
                "canvas {}x{} not divisible by patch {}",
                self.max_height, self.max_width, self.patch
            ));
        }
        if self.text_len != TEXT_LEN {
            return bad(format!("text_len must be {TEXT_LEN}"));
        }
        if self.vocab != Vocabulary::get().len() {
            return bad(format!("vocab size {} does not match the token table", self.vocab));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        Ok(())
    }

    /// Values per patch token: `3·patch²`.
    pub fn token_dim(&self) -> usize {
        CHANNELS * self.patch * self.patch
    }

    /// Patch grid of the largest canvas.
    pub fn max_grid(&self) -> (usize, usize) {
        (self.max_height / self.patch, self.max_width / self.patch)
    }

    fn specs(&self) -> Vec<(String, Vec<usize>, Init)> {
        use Init::*;
        let d = self.d_model;
        let h = self.mlp_ratio * d;
        let (gh, gw) = self.max_grid();
        let mut v: Vec<(String, Vec<usize>, Init)> = vec![
            ("patch_embed.w".into(), vec![d, self.token_dim()], Normal),
            ("patch_embed.b".into(), vec![d], Zeros),
            ("text_embed".into(), vec![self.vocab, d], Normal),
            ("pos_img".into(), vec![gh * gw, d], Normal),
            ("pos_text".into(), vec![self.text_len, d], Normal),
            ("modality".into(), vec![2, d], Normal),
            ("time.w1".into(), vec![d, d], Normal),
            ("time.b1".into(), vec![d], Zeros),
            ("time.w2".into(), vec![d, d], Normal),
            ("time.b2".into(), vec![d], Zeros),
        ];
        for i in 0..self.blocks {
            let p = |s: &str| format!("blocks.{i}.{s}");
            for w in ["q", "k", "v", "o"] {
                v.push((p(&format!("attn.w{w}")), vec![d, d], Normal));
                v.push((p(&format!("attn.b{w}")), vec![d], Zeros));
            }
            v.push((p("mlp.w1"), vec![h, d], Normal));
            v.push((p("mlp.b1"), vec![h], Zeros));
            v.push((p("mlp.w2"), vec![d, h], Normal));
            v.push((p("mlp.b2"), vec![d], Zeros));
            v.push((p("ada.w"), vec![6 * d, d], Zeros));
            v.push((p("ada.b"), vec![6 * d], Zeros));
        }
        v.push(("final_norm.gain".into(), vec![d], Ones));
        v.push(("final_norm.bias".into(), vec![d], Zeros));
        v.push(("head.w".into(), vec![self.token_dim(), d], Normal));
        v.push(("head.b".into(), vec![self.token_dim()], Zeros));
        v
    }

    /// Every parameter name with its shape, in initialization order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.specs().into_iter().map(|(n, s, _)| (n, s)).collect()
    }

    /// Names of the attention and MLP projection matrices.
    pub fn projection_names(&self) -> Vec<String> {
        (0..self.blocks)
            .flat_map(|i| {
                ["attn.wq", "attn.wk", "attn.wv", "attn.wo", "mlp.w1", "mlp.w2"]
                    .into_iter()
                    .map(move |s| format!("blocks.{i}.{s}"))
            })
            .collect()
    }
}

/// Named model weights. Matrices are stored `[out × in]` and applied as `x·Wᵀ + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor<f32>>,
    /// Set once an adapter has been folded in; see [`crate::lora::merge`].
    pub merged: bool,
}

impl ModelParams {
    /// Checks names and shapes against `config`.
    pub fn new(config: ModelConfig, tensors: BTreeMap<String, Tensor<f32>>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != tensors.len() {
            return Err(Error::Invalid(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for (name, shape) in &shapes {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Invalid(format!("missing parameter {name}")))?;
            if t.shape() != &shape[..] {
                return Err(Error::shape(
                    "ModelParams",
                    format!("{name}: {:?} vs {:?}", t.shape(), shape),
                ));
            }
        }
        Ok(Self {
            config,
            tensors,
            merged: false,
        })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownTarget(name.to_string()))
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }
}

/// Truncated-normal weights, zero biases, unit norm gains, zero adaLN output.
pub fn init_params(config: &ModelConfig, rng: &mut Rng) -> Result<ModelParams> {
    config.validate()?;
    let mut tensors = BTreeMap::new();
    for (name, shape, init) in config.specs() {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Normal => (0..n).map(|_| rng.truncated_normal(INIT_STD) as f32).collect(),
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
        };
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    ModelParams::new(config.clone(), tensors)
}

/// `[3, H, W]` → `[N, 3·p²]`, patches row-major, values within a patch ordered
/// `(channel, dy, dx)`.
pub fn patchify<S: Scalar>(x: &Tensor<S>, patch: usize) -> Result<Tensor<S>> {
    let (h, w) = field_dims(x)?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Dimension(format!(
            "{h}x{w} canvas is not divisible by patch {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let td = CHANNELS * patch * patch;
    let src = x.data();
    let mut out = Vec::with_capacity(gh * gw * td);
    for gy in 0..gh {
        for gx in 0..gw {
            for c in 0..CHANNELS {
                for dy in 0..patch {
                    let s = (c * h + gy * patch + dy) * w + gx * patch;
                    out.extend_from_slice(&src[s..s + patch]);
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, td], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<S: Scalar>(tokens: &Tensor<S>, patch: usize, height: usize, width: usize) -> Result<Tensor<S>> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(Error::Dimension(format!(
            "{height}x{width} canvas is not divisible by patch {patch}"
        )));
    }
    let (gh, gw) = (height / patch, width / patch);
    let td = CHANNELS * patch * patch;
    if tokens.shape() != [gh * gw, td] {
        return Err(Error::shape(
            "unpatchify",
            format!("{:?} tokens for a {}x{} grid of {} values", tokens.shape(), gh, gw, td),
        ));
    }
    let src = tokens.data();
    let mut out = vec![S::zero(); CHANNELS * height * width];
    let mut k = 0;
    for gy in 0..gh {
        for gx in 0..gw {
            for c in 0..CHANNELS {
                for dy in 0..patch {
                    let s = (c * height + gy * patch + dy) * width + gx * patch;
                    out[s..s + patch].copy_from_slice(&src[k..k + patch]);
                    k += patch;
                }
            }
        }
    }
    Tensor::new(vec![CHANNELS, height, width], out)
}

fn field_dims<S: Scalar>(x: &Tensor<S>) -> Result<(usize, usize)> {
    match x.shape() {
        &[CHANNELS, h, w] => Ok((h, w)),
        s => Err(Error::shape("field", format!("expected [3, H, W], got {s:?}"))),
    }
}

/// Sinusoidal features of `1000·t`: `d/2` sines then `d/2` cosines at
/// frequencies `10000^(−i/(d/2))`.
pub fn timestep_features(t: f64, d: usize) -> Vec<f64> {
    let half = d / 2;
    let args: Vec<f64> = (0..half)
        .map(|i| 1000.0 * t * (-(10000f64.ln()) * i as f64 / half as f64).exp())
        .collect();
    args.iter()
        .map(|a| a.sin())
        .chain(args.iter().map(|a| a.cos()))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimeEmbed {
    pub t: f64,
    pub embedding: Tensor<f32>,
}

/// Timestep features through the model's two-layer time MLP.
pub fn timestep_embed(params: &ModelParams, t: f64) -> Result<TimeEmbed> {
    check_t(t)?;
    let mut g = Graph::<f32>::new();
    let bound = Bound::new(&mut g, params, false, None)?;
    let d = params.config.d_model;
    let f = timestep_features(t, d).into_iter().map(|v| v as f32).collect();
    let x = g.constant(Tensor::new(vec![1, d], f)?);
    let e = time_mlp(&mut g, &bound, x)?;
    let embedding = g.take_value(e).reshape(vec![d])?;
    Ok(TimeEmbed { t, embedding })
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Invalid(format!("timestep {t} outside [0, 1]")));
    }
    Ok(())
}

/// Parameters (and adapter factors) placed on a graph as leaves.
pub struct Bound {
    base: BTreeMap<String, Var>,
    lora: BTreeMap<String, (Var, Var)>,
    lora_alpha: f64,
    lora_rank: usize,
}

impl Bound {
    /// Base tensors become trainable leaves when `base_trainable`; adapter
    /// factors when the paired flag is set.
    pub fn new<S: Scalar>(
        g: &mut Graph<S>,
        params: &ModelParams,
        base_trainable: bool,
        adapter: Option<(&LoraAdapter, bool)>,
    ) -> Result<Self> {
        let base = params
            .tensors
            .iter()
            .map(|(n, t)| (n.clone(), g.leaf(t.cast(), base_trainable)))
            .collect();
        let (mut lora, mut alpha, mut rank) = (BTreeMap::new(), 0.0, 1);
        if let Some((ad, trainable)) = adapter {
            ad.check_against(params)?;
            alpha = ad.config.alpha;
            rank = ad.config.rank;
            for (name, f) in &ad.factors {
                let a = g.leaf(f.a.cast(), trainable);
                let b = g.leaf(f.b.cast(), trainable);
                lora.insert(name.clone(), (a, b));
            }
        }
        Ok(Self {
            base,
            lora,
            lora_alpha: alpha,
            lora_rank: rank,
        })
    }

    /// Binds tensors already placed on a graph, e.g. 64-bit copies of the
    /// parameters for gradient checking. `lora` maps target names to `(A, B)`.
    pub fn from_vars(
        base: BTreeMap<String, Var>,
        lora: BTreeMap<String, (Var, Var)>,
        lora_alpha: f64,
        lora_rank: usize,
    ) -> Self {
        Self {
            base,
            lora,
            lora_alpha,
            lora_rank,
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.base
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownTarget(name.to_string()))
    }

    pub fn base(&self) -> &BTreeMap<String, Var> {
        &self.base
    }

    /// Adapter factors `(A, B)` by target name.
    pub fn lora(&self) -> &BTreeMap<String, (Var, Var)> {
        &self.lora
    }

    fn linear<S: Scalar>(&self, g: &mut Graph<S>, x: Var, w: &str, bias: Option<&str>) -> Result<Var> {
        let wv = self.var(w)?;
        let y = match self.lora.get(w) {
            Some(&(a, b)) => adapted_matmul(g, x, wv, a, b, self.lora_alpha, self.lora_rank)?,
            None => g.matmul_nt(x, wv)?,
        };
        match bias {
            Some(n) => g.add_row(y, self.var(n)?),
            None => Ok(y),
        }
    }
}

fn time_mlp<S: Scalar>(g: &mut Graph<S>, b: &Bound, feats: Var) -> Result<Var> {
    let h = b.linear(g, feats, "time.w1", Some("time.b1"))?;
    let h = g.gelu(h)?;
    b.linear(g, h, "time.w2", Some("time.b2"))
}

/// One element of a batched forward: noisy canvas `z` (`[3, H, W]`), time, prompt.
#[derive(Clone, Copy, Debug)]
pub struct FieldInput<'a> {
    pub z: &'a Tensor<f32>,
    pub t: f64,
    pub text: &'a TokenSeq,
}

struct Span {
    offset: usize,
    len: usize,
    key_mask: Option<Vec<bool>>,
}

/// Builds the forward pass on `g`; returns predicted patch tokens
/// `[B·N, 3·p²]`, sample-major. All inputs must share one canvas size.
pub fn forward_tokens<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    cfg: &ModelConfig,
    inputs: &[FieldInput<'_>],
) -> Result<Var> {
    let first = inputs.first().ok_or_else(|| Error::Invalid("empty batch".into()))?;
    let (h, w) = field_dims(first.z)?;
    if h > cfg.max_height || w > cfg.max_width {
        return Err(Error::Dimension(format!(
            "{h}x{w} canvas exceeds {}x{}",
            cfg.max_height, cfg.max_width
        )));
    }
    let p = cfg.patch;
    let d = cfg.d_model;
    let (gh, gw) = (h / p, w / p);
    let n_img = gh * gw;
    let (_, max_gw) = cfg.max_grid();

    let mut pdata = Vec::with_capacity(inputs.len() * n_img * cfg.token_dim());
    let mut feats = Vec::with_capacity(inputs.len() * d);
    for inp in inputs {
        if inp.z.shape() != first.z.shape() {
            return Err(Error::shape(
                "forward",
                format!("batch mixes {:?} and {:?}", first.z.shape(), inp.z.shape()),
            ));
        }
        check_t(inp.t)?;
        pdata.extend(patchify(inp.z, p)?.data().iter().map(|&v| S::from_f64(v as f64)));
        feats.extend(timestep_features(inp.t, d).into_iter().map(S::from_f64));
    }
    let patches = g.constant(Tensor::new(vec![inputs.len() * n_img, cfg.token_dim()], pdata)?);
    let img = bound.linear(g, patches, "patch_embed.w", Some("patch_embed.b"))?;
    let pos_ids: Vec<usize> = (0..gh).flat_map(|y| (0..gw).map(move |x| y * max_gw + x)).collect();
    let pos = g.embedding(bound.var("pos_img")?, &pos_ids)?;
    let modality = bound.var("modality")?;
    let m_img = g.embedding(modality, &[0])?;
    let m_txt = g.embedding(modality, &[1])?;
    let tf = g.constant(Tensor::new(vec![inputs.len(), d], feats)?);
    let c = time_mlp(g, bound, tf)?;
    let c_act = g.gelu(c)?;

    let text_table = bound.var("text_embed")?;
    let pos_text = bound.var("pos_text")?;
    let mut parts = Vec::with_capacity(2 * inputs.len());
    let mut spans = Vec::with_capacity(inputs.len());
    let mut offset = 0;
    for (i, inp) in inputs.iter().enumerate() {
        let im = g.slice_rows(img, i * n_img, n_img)?;
        let im = g.add(im, pos)?;
        let im = g.add_row(im, m_img)?;
        let ids = inp.text.ids();
        let eff = inp.text.effective_len();
        let l = if cfg.truncate_text { eff } else { ids.len() };
        let tx = g.embedding(text_table, &ids[..l])?;
        let pt = g.embedding(pos_text, &(0..l).collect::<Vec<_>>())?;
        let tx = g.add(tx, pt)?;
        let tx = g.add_row(tx, m_txt)?;
        parts.push(im);
        parts.push(tx);
        let key_mask = (!cfg.truncate_text).then(|| {
            std::iter::repeat_n(true, n_img)
                .chain((0..l).map(|j| j < eff))
                .collect()
        });
        spans.push(Span {
            offset,
            len: n_img + l,
            key_mask,
        });
        offset += n_img + l;
    }
    let mut x = g.concat_rows(&parts)?;
    for i in 0..cfg.blocks {
        x = block(g, bound, cfg, i, x, c_act, &spans)?;
    }
    let img_rows = spans
        .iter()
        .map(|s| g.slice_rows(x, s.offset, n_img))
        .collect::<Result<Vec<_>>>()?;
    let xi = if img_rows.len() == 1 {
        img_rows[0]
    } else {
        g.concat_rows(&img_rows)?
    };
    let xn = g.layer_norm(
        xi,
        Some(bound.var("final_norm.gain")?),
        Some(bound.var("final_norm.bias")?),
        LN_EPS,
    )?;
    bound.linear(g, xn, "head.w", Some("head.b"))
}

/// Applies `f` to each sample's rows and stacks the results.
fn per_sample<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    spans: &[Span],
    mut f: impl FnMut(&mut Graph<S>, usize, Var) -> Result<Var>,
) -> Result<Var> {
    let mut out = Vec::with_capacity(spans.len());
    for (i, s) in spans.iter().enumerate() {
        let xs = if spans.len() == 1 {
            x
        } else {
            g.slice_rows(x, s.offset, s.len)?
        };
        out.push(f(g, i, xs)?);
    }
    if out.len() == 1 {
        Ok(out[0])
    } else {
        g.concat_rows(&out)
    }
}

fn block<S: Scalar>(
    g: &mut Graph<S>,
    b: &Bound,
    cfg: &ModelConfig,
    i: usize,
    x: Var,
    c_act: Var,
    spans: &[Span],
) -> Result<Var> {
    let n = |s: &str| format!("blocks.{i}.{s}");
    let d = cfg.d_model;
    let ada = b.linear(g, c_act, &n("ada.w"), Some(&n("ada.b")))?;
    // Per sample: shift, 1 + scale, gate for attention, then the same for the MLP.
    let mut mods = Vec::with_capacity(spans.len());
    for s in 0..spans.len() {
        let row = g.slice_rows(ada, s, 1)?;
        let mut m = [row; 6];
        for (k, slot) in m.iter_mut().enumerate() {
            *slot = g.slice_cols(row, k * d, d)?;
            if k % 3 == 1 {
                *slot = g.add_scalar(*slot, 1.0)?;
            }
        }
        mods.push(m);
    }
    let modulate = |g: &mut Graph<S>, h: Var, k: usize| {
        per_sample(g, h, spans, |g, s, hs| {
            let hs = g.mul_row(hs, mods[s][k + 1])?;
            g.add_row(hs, mods[s][k])
        })
    };
    let gate = |g: &mut Graph<S>, h: Var, k: usize| per_sample(g, h, spans, |g, s, hs| g.mul_row(hs, mods[s][k + 2]));

    let h = g.layer_norm(x, None, None, LN_EPS)?;
    let h = modulate(g, h, 0)?;
    let q = b.linear(g, h, &n("attn.wq"), Some(&n("attn.bq")))?;
    let k = b.linear(g, h, &n("attn.wk"), Some(&n("attn.bk")))?;
    let v = b.linear(g, h, &n("attn.wv"), Some(&n("attn.bv")))?;
    let dh = d / cfg.heads;
    let inv = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(spans.len());
    for s in spans {
        let whole = spans.len() == 1;
        let (qs, ks, vs) = if whole {
            (q, k, v)
        } else {
            (
                g.slice_rows(q, s.offset, s.len)?,
                g.slice_rows(k, s.offset, s.len)?,
                g.slice_rows(v, s.offset, s.len)?,
            )
        };
        let mut heads = Vec::with_capacity(cfg.heads);
        for hh in 0..cfg.heads {
            let qh = g.slice_cols(qs, hh * dh, dh)?;
            let kh = g.slice_cols(ks, hh * dh, dh)?;
            let vh = g.slice_cols(vs, hh * dh, dh)?;
            let sc = g.matmul_nt(qh, kh)?;
            let sc = g.scale(sc, inv)?;
            let pr = g.softmax(sc, s.key_mask.as_deref())?;
            heads.push(g.matmul(pr, vh)?);
        }
        outs.push(g.concat_cols(&heads)?);
    }
    let att = if outs.len() == 1 {
        outs[0]
    } else {
        g.concat_rows(&outs)?
    };
    let att = b.linear(g, att, &n("attn.wo"), Some(&n("attn.bo")))?;
    let att = gate(g, att, 0)?;
    let x = g.add(x, att)?;

    let h = g.layer_norm(x, None, None, LN_EPS)?;
    let h = modulate(g, h, 3)?;
    let h = b.linear(g, h, &n("mlp.w1"), Some(&n("mlp.b1")))?;
    let h = g.gelu(h)?;
    let h = b.linear(g, h, &n("mlp.w2"), Some(&n("mlp.b2")))?;
    let h = gate(g, h, 3)?;
    g.add(x, h)
}

/// Batched velocity prediction without gradients.
pub fn forward_batch(
    params: &ModelParams,
    adapter: Option<&LoraAdapter>,
    inputs: &[FieldInput<'_>],
) -> Result<Vec<Tensor<f32>>> {
    let mut g = Graph::<f32>::new();
    let bound = Bound::new(&mut g, params, false, adapter.map(|a| (a, false)))?;
    let out = forward_tokens(&mut g, &bound, &params.config, inputs)?;
    let toks = g.take_value(out);
    let (h, w) = field_dims(inputs[0].z)?;
    let per = toks.numel() / inputs.len();
    let td = params.config.token_dim();
    toks.data()
        .chunks(per)
        .map(|c| unpatchify(&Tensor::new(vec![per / td, td], c.to_vec())?, params.config.patch, h, w))
        .collect()
}

/// Velocity field with the shape of `z`.
pub fn forward(
    params: &ModelParams,
    adapter: Option<&LoraAdapter>,
    z: &Tensor<f32>,
    t: f64,
    text: &TokenSeq,
) -> Result<Tensor<f32>> {
    Ok(forward_batch(params, adapter, &[FieldInput { z, t, text }])?.remove(0))
}
