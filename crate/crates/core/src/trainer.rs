//! AdamW, base pretraining and adapter tuning loops.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_adapter, load_model, save_adapter, save_model, tensors_digest, OPTIM_M, OPTIM_V};
use crate::dit::{init_params, Bound, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::lora::{init_adapter, LoraAdapter, LoraConfig};
use crate::prompt::TokenSeq;
use crate::sampler::fm_loss_graph;
use crate::synth::ImageSetRecord;
use crate::tensor::{Graph, Rng, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const LOG_EVERY: usize = 100;
pub const TREND_WINDOW: usize = 1000;
/// Moving-average increases beyond this fraction are flagged.
pub const TREND_TOLERANCE: f64 = 0.05;
pub const MIN_LORA_SETS: usize = 20;
pub const MAX_LORA_SETS: usize = 100;
pub const MAX_DATASET: usize = 1000;

// rng stream labels under the training seed
const INIT_STREAM: u64 = 0x1417;
const STEP_STREAM: u64 = 0x57e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Base,
    Lora,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub grad_clip: f64,
    /// Snapshot interval in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn base() -> Self {
        Self {
            phase: Phase::Base,
            steps: 20_000,
            batch: 4,
            lr: 1e-4,
            weight_decay: 0.01,
            seed: 0,
            grad_clip: 1.0,
            checkpoint_every: 0,
        }
    }

    pub fn lora() -> Self {
        Self {
            phase: Phase::Lora,
            steps: 5_000,
            lr: 1e-3,
            weight_decay: 0.0,
            ..Self::base()
        }
    }

    pub fn for_phase(phase: Phase) -> Self {
        match phase {
            Phase::Base => Self::base(),
            Phase::Lora => Self::lora(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(m.into()));
        if self.batch == 0 {
            return bad("batch must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }
}

/// Adam moments for exactly the trainable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
}

impl OptimizerState {
    pub fn new(params: &BTreeMap<String, Tensor<f32>>) -> Self {
        let zeros = |t: &Tensor<f32>| Tensor::zeros(t.shape().to_vec());
        Self {
            step: 0,
            m: params.iter().map(|(k, t)| (k.clone(), zeros(t))).collect(),
            v: params.iter().map(|(k, t)| (k.clone(), zeros(t))).collect(),
        }
    }

    pub fn to_tensors(&self) -> BTreeMap<String, Tensor<f32>> {
        let m = self.m.iter().map(|(k, t)| (format!("{OPTIM_M}{k}"), t.clone()));
        let v = self.v.iter().map(|(k, t)| (format!("{OPTIM_V}{k}"), t.clone()));
        m.chain(v).collect()
    }

    pub fn from_tensors(step: u64, tensors: &BTreeMap<String, Tensor<f32>>) -> Self {
        let pick = |p: &str| {
            tensors
                .iter()
                .filter_map(|(k, t)| k.strip_prefix(p).map(|n| (n.to_string(), t.clone())))
                .collect()
        };
        Self {
            step,
            m: pick(OPTIM_M),
            v: pick(OPTIM_V),
        }
    }

    /// Moments must mirror `params` name for name and shape for shape.
    pub fn check(&self, params: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
        for moments in [&self.m, &self.v] {
            if moments.len() != params.len() {
                return Err(Error::shape("adam", "optimizer state does not match trainable set"));
            }
            for (k, t) in params {
                match moments.get(k) {
                    Some(m) if m.shape() == t.shape() => {}
                    _ => return Err(Error::shape("adam", format!("moment for {k} missing or misshapen"))),
                }
            }
        }
        Ok(())
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor<f32>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let c = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= c);
        }
    }
    norm
}

/// One AdamW update: clip, update moments, bias-correct, then
/// `p -= lr * (m̂ / (sqrt(v̂) + eps) + wd * p)`. Returns the pre-clip norm.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor<f32>>,
    mut grads: BTreeMap<String, Tensor<f32>>,
    state: &mut OptimizerState,
    config: &TrainConfig,
) -> Result<f64> {
    state.check(params)?;
    if grads.len() != params.len() {
        return Err(Error::shape("adam", "gradient set does not match trainable set"));
    }
    for (k, p) in params.iter() {
        match grads.get(k) {
            Some(g) if g.shape() == p.shape() => {}
            _ => return Err(Error::shape("adam", format!("gradient for {k} missing or misshapen"))),
        }
    }
    let norm = clip_global_norm(&mut grads, config.grad_clip);
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    let (lr, wd) = (config.lr, config.weight_decay);
    for (k, p) in params.iter_mut() {
        let g = grads[k].data();
        let m = state.m.get_mut(k).expect("checked").data_mut();
        let v = state.v.get_mut(k).expect("checked").data_mut();
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            let gi = g[i] as f64;
            let mi = BETA1 * m[i] as f64 + (1.0 - BETA1) * gi;
            let vi = BETA2 * v[i] as f64 + (1.0 - BETA2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let upd = (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS) + wd * *w as f64;
            *w = (*w as f64 - lr * upd) as f32;
        }
    }
    Ok(norm)
}

/// A training example prepared once: composed canvas pixels and tokens.
struct Example {
    pixels: Tensor<f32>,
    tokens: TokenSeq,
    bucket: (usize, usize),
}

fn prepare(records: &[ImageSetRecord]) -> Result<Vec<Example>> {
    records
        .iter()
        .map(|r| {
            let c = r.canvas()?;
            Ok(Example {
                bucket: (c.height(), c.width()),
                pixels: c.into_tensor(),
                tokens: r.tokens()?,
            })
        })
        .collect()
}

/// Picks `batch` examples sharing one canvas size: an anchor uniformly over
/// the dataset, the rest uniformly (with replacement) over its size bucket.
fn select_batch(examples: &[Example], batch: usize, rng: &mut Rng) -> Vec<usize> {
    let anchor = rng.below(examples.len());
    let bucket: Vec<usize> = (0..examples.len())
        .filter(|&i| examples[i].bucket == examples[anchor].bucket)
        .collect();
    let mut out = vec![anchor];
    out.extend((1..batch).map(|_| bucket[rng.below(bucket.len())]));
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogLine {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

/// Per-run record returned by the training loops.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainSummary {
    pub start_step: usize,
    pub steps: usize,
    /// Loss of every step run, in order.
    pub losses: Vec<f64>,
    pub first_loss: Option<f64>,
    /// Mean over the last `LOG_EVERY` steps.
    pub final_loss: Option<f64>,
    /// Steps at which the trailing moving average rose beyond tolerance.
    pub trend_flags: Vec<usize>,
    pub wall_ms: u64,
    pub checkpoint: PathBuf,
    pub snapshots: Vec<PathBuf>,
}

impl TrainSummary {
    pub fn reduction(&self) -> Option<f64> {
        Some(self.first_loss? / self.final_loss?)
    }
}

/// Where training output goes.
#[derive(Clone, Debug)]
pub struct TrainIo {
    pub out: PathBuf,
    pub log: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    /// End the run early at this step, writing the checkpoint a full run
    /// would have snapshotted there.
    pub stop_after: Option<usize>,
}

impl TrainIo {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self {
            out: out.into(),
            log: None,
            resume: None,
            stop_after: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TrainState {
    step: usize,
    optim_step: u64,
    config: TrainConfig,
    dataset: String,
}

fn dataset_digest(examples: &[Example]) -> String {
    let mut m = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        m.insert(format!("{i:06}.x"), e.pixels.clone());
        let ids = e.tokens.ids().iter().map(|&x| x as f32).collect::<Vec<_>>();
        m.insert(format!("{i:06}.t"), Tensor::new(vec![ids.len()], ids).expect("1-d"));
    }
    tensors_digest(&m)
}

fn snapshot_path(out: &Path, step: usize) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("ckpt");
    let ext = out.extension().and_then(|s| s.to_str()).unwrap_or("ckpt");
    out.with_file_name(format!("{stem}.step{step:06}.{ext}"))
}

struct Logger {
    out: Option<BufWriter<File>>,
    start: Instant,
}

impl Logger {
    fn open(path: Option<&Path>, append: bool) -> Result<Self> {
        let out = match path {
            Some(p) => {
                if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                }
                let f = fs::OpenOptions::new()
                    .create(true)
                    .write(true)
                    .append(append)
                    .truncate(!append)
                    .open(p)
                    .map_err(|e| Error::io(p, e))?;
                Some(BufWriter::new(f))
            }
            None => None,
        };
        Ok(Self {
            out,
            start: Instant::now(),
        })
    }

    fn line(&mut self, step: usize, loss: f64, lr: f64) -> Result<()> {
        let line = LogLine {
            step,
            loss,
            lr,
            wall_ms: self.start.elapsed().as_millis() as u64,
        };
        log::info!("step {step} loss {loss:.5}");
        if let Some(w) = self.out.as_mut() {
            serde_json::to_writer(&mut *w, &line)?;
            w.write_all(b"\n").map_err(|e| Error::io("training log", e))?;
            w.flush().map_err(|e| Error::io("training log", e))?;
        }
        Ok(())
    }
}

/// State the generic loop needs from either phase.
trait Phaser {
    fn trainable_mut(&mut self) -> &mut BTreeMap<String, Tensor<f32>>;
    /// Builds the loss graph for one batch and returns (loss, grads).
    fn loss_and_grads(
        &self,
        batch: &[(&Tensor<f32>, &TokenSeq)],
        rng: &mut Rng,
    ) -> Result<(f64, BTreeMap<String, Tensor<f32>>)>;
    fn save(&self, path: &Path, state: serde_json::Value, optim: &OptimizerState) -> Result<()>;
}

fn collect_grads(
    g: &Graph<f32>,
    vars: impl Iterator<Item = (String, crate::tensor::Var)>,
) -> BTreeMap<String, Tensor<f32>> {
    vars.map(|(k, v)| (k, g.grad_or_zeros(v))).collect()
}

struct BasePhase {
    params: ModelParams,
}

impl Phaser for BasePhase {
    fn trainable_mut(&mut self) -> &mut BTreeMap<String, Tensor<f32>> {
        &mut self.params.tensors
    }
    fn loss_and_grads(
        &self,
        batch: &[(&Tensor<f32>, &TokenSeq)],
        rng: &mut Rng,
    ) -> Result<(f64, BTreeMap<String, Tensor<f32>>)> {
        let mut g = Graph::<f32>::new().with_finite_checks(false);
        let bound = Bound::new(&mut g, &self.params, true, None)?;
        let loss = fm_loss_graph(&mut g, &bound, &self.params.config, batch, rng)?;
        let value = g.scalar(loss) as f64;
        if !value.is_finite() {
            return Ok((value, BTreeMap::new()));
        }
        g.backward(loss)?;
        let grads = collect_grads(&g, bound.base().iter().map(|(k, v)| (k.clone(), *v)));
        Ok((value, grads))
    }
    fn save(&self, path: &Path, state: serde_json::Value, optim: &OptimizerState) -> Result<()> {
        save_model(path, &self.params, Some(state), &optim.to_tensors())
    }
}

struct LoraPhase<'a> {
    base: &'a ModelParams,
    config: LoraConfig,
    flat: BTreeMap<String, Tensor<f32>>,
}

impl LoraPhase<'_> {
    fn adapter(&self) -> LoraAdapter {
        let factors = self
            .config
            .targets
            .iter()
            .map(|n| {
                let f = crate::lora::LoraFactors {
                    a: self.flat[&format!("{n}.A")].clone(),
                    b: self.flat[&format!("{n}.B")].clone(),
                };
                (n.clone(), f)
            })
            .collect();
        LoraAdapter {
            config: self.config.clone(),
            factors,
        }
    }

    fn flatten(adapter: &LoraAdapter) -> BTreeMap<String, Tensor<f32>> {
        let mut flat = BTreeMap::new();
        for (n, f) in &adapter.factors {
            flat.insert(format!("{n}.A"), f.a.clone());
            flat.insert(format!("{n}.B"), f.b.clone());
        }
        flat
    }
}

impl Phaser for LoraPhase<'_> {
    fn trainable_mut(&mut self) -> &mut BTreeMap<String, Tensor<f32>> {
        &mut self.flat
    }
    fn loss_and_grads(
        &self,
        batch: &[(&Tensor<f32>, &TokenSeq)],
        rng: &mut Rng,
    ) -> Result<(f64, BTreeMap<String, Tensor<f32>>)> {
        let adapter = self.adapter();
        let mut g = Graph::<f32>::new().with_finite_checks(false);
        let bound = Bound::new(&mut g, self.base, false, Some((&adapter, true)))?;
        let loss = fm_loss_graph(&mut g, &bound, &self.base.config, batch, rng)?;
        let value = g.scalar(loss) as f64;
        if !value.is_finite() {
            return Ok((value, BTreeMap::new()));
        }
        g.backward(loss)?;
        let vars = bound
            .lora()
            .iter()
            .flat_map(|(k, &(a, b))| [(format!("{k}.A"), a), (format!("{k}.B"), b)]);
        Ok((value, collect_grads(&g, vars)))
    }
    fn save(&self, path: &Path, state: serde_json::Value, optim: &OptimizerState) -> Result<()> {
        save_adapter(
            path,
            &self.adapter(),
            &self.base.config,
            Some(state),
            &optim.to_tensors(),
        )
    }
}

fn moving_average_flags(losses: &[f64], start: usize) -> Vec<usize> {
    if losses.len() < 2 * TREND_WINDOW {
        return Vec::new();
    }
    let mut flags = Vec::new();
    let mut best = f64::INFINITY;
    // compare non-overlapping windows against the lowest so far
    for (w, chunk) in losses.chunks_exact(TREND_WINDOW).enumerate() {
        let avg = chunk.iter().sum::<f64>() / TREND_WINDOW as f64;
        if avg > best * (1.0 + TREND_TOLERANCE) {
            flags.push(start + (w + 1) * TREND_WINDOW - 1);
        }
        best = best.min(avg);
    }
    flags
}

fn run<P: Phaser>(
    phase: &mut P,
    config: &TrainConfig,
    examples: &[Example],
    io: &TrainIo,
    start_step: usize,
    mut optim: OptimizerState,
) -> Result<TrainSummary> {
    let digest = dataset_digest(examples);
    let mut logger = Logger::open(io.log.as_deref(), start_step > 0)?;
    let started = Instant::now();
    let mut summary = TrainSummary {
        start_step,
        checkpoint: io.out.clone(),
        ..Default::default()
    };
    let state_json = |step: usize, optim: &OptimizerState| {
        serde_json::to_value(TrainState {
            step,
            optim_step: optim.step,
            config: config.clone(),
            dataset: digest.clone(),
        })
        .expect("plain struct")
    };
    let mut window = Vec::with_capacity(LOG_EVERY);
    let last = io.stop_after.map_or(config.steps, |s| s.min(config.steps));
    for step in start_step..last {
        let mut rng = Rng::new(config.seed).fork(STEP_STREAM).fork(step as u64);
        let idx = select_batch(examples, config.batch, &mut rng);
        let batch: Vec<(&Tensor<f32>, &TokenSeq)> = idx
            .iter()
            .map(|&i| (&examples[i].pixels, &examples[i].tokens))
            .collect();
        let (loss, grads) = phase.loss_and_grads(&batch, &mut rng)?;
        if !loss.is_finite() {
            log::error!(
                "non-finite loss at step {step}: batch {idx:?}, lr {}, last losses {:?}",
                config.lr,
                &summary.losses[summary.losses.len().saturating_sub(5)..]
            );
            return Err(Error::Diverged { step, loss });
        }
        let norm = adam_step(phase.trainable_mut(), grads, &mut optim, config)?;
        if !norm.is_finite() {
            log::error!("non-finite gradient norm at step {step}: batch {idx:?}, loss {loss}");
            return Err(Error::Diverged { step, loss });
        }
        summary.losses.push(loss);
        window.push(loss);
        if step == start_step || (step + 1) % LOG_EVERY == 0 || step + 1 == last {
            let avg = window.iter().sum::<f64>() / window.len() as f64;
            logger.line(step, avg, config.lr)?;
            window.clear();
        }
        let done = step + 1;
        if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < config.steps {
            let p = snapshot_path(&io.out, done);
            phase.save(&p, state_json(done, &optim), &optim)?;
            summary.snapshots.push(p);
        }
    }
    let end = last.max(start_step);
    phase.save(&io.out, state_json(end, &optim), &optim)?;
    summary.steps = end;
    summary.first_loss = summary.losses.first().copied();
    let tail = &summary.losses[summary.losses.len().saturating_sub(LOG_EVERY)..];
    if !tail.is_empty() {
        summary.final_loss = Some(tail.iter().sum::<f64>() / tail.len() as f64);
    }
    summary.trend_flags = moving_average_flags(&summary.losses, start_step);
    for s in &summary.trend_flags {
        log::warn!("loss moving average rose by more than {TREND_TOLERANCE} near step {s}");
    }
    summary.wall_ms = started.elapsed().as_millis() as u64;
    Ok(summary)
}

fn check_dataset(records: &[ImageSetRecord], max: usize) -> Result<()> {
    if records.is_empty() || records.len() > max {
        return Err(Error::Invalid(format!(
            "dataset has {} sets; expected between 1 and {max}",
            records.len()
        )));
    }
    Ok(())
}

fn resume_state(meta_train: Option<serde_json::Value>, config: &TrainConfig) -> Result<TrainState> {
    let state: TrainState = serde_json::from_value(
        meta_train.ok_or_else(|| Error::Format("checkpoint carries no training state".into()))?,
    )?;
    let c = &state.config;
    if c.phase != config.phase || c.seed != config.seed || c.batch != config.batch {
        return Err(Error::Invalid(
            "resume config differs from the checkpoint in phase, seed or batch".into(),
        ));
    }
    Ok(state)
}

/// Initializes a model from `config.seed`, or continues `io.resume`, and
/// minimizes the flow-matching loss over `records`.
pub fn train_base(
    config: &TrainConfig,
    model: &ModelConfig,
    records: &[ImageSetRecord],
    io: &TrainIo,
) -> Result<TrainSummary> {
    config.validate()?;
    if config.phase != Phase::Base {
        return Err(Error::Invalid("train_base needs a base-phase config".into()));
    }
    check_dataset(records, usize::MAX)?;
    let examples = prepare(records)?;
    let (mut phase, start, optim) = match &io.resume {
        Some(p) => {
            let (params, meta, optim_t) = load_model(p)?;
            let state = resume_state(meta.train, config)?;
            let optim = OptimizerState::from_tensors(state.optim_step, &optim_t);
            optim.check(&params.tensors)?;
            (BasePhase { params }, state.step, optim)
        }
        None => {
            let params = init_params(model, &mut Rng::new(config.seed).fork(INIT_STREAM))?;
            let optim = OptimizerState::new(&params.tensors);
            (BasePhase { params }, 0, optim)
        }
    };
    let s = run(&mut phase, config, &examples, io, start, optim)?;
    if let Some(r) = s.reduction() {
        if r < 10.0 {
            log::warn!("final loss is only {r:.2}x below the first step's");
        }
    }
    Ok(s)
}

/// Tunes a fresh adapter (or `io.resume`) on `records` with `base` frozen.
pub fn train_lora(
    config: &TrainConfig,
    base: &ModelParams,
    records: &[ImageSetRecord],
    lora: &LoraConfig,
    io: &TrainIo,
) -> Result<TrainSummary> {
    config.validate()?;
    if config.phase != Phase::Lora {
        return Err(Error::Invalid("train_lora needs a lora-phase config".into()));
    }
    if base.merged {
        return Err(Error::Invalid("cannot tune an adapter on merged weights".into()));
    }
    check_dataset(records, MAX_DATASET)?;
    if !(MIN_LORA_SETS..=MAX_LORA_SETS).contains(&records.len()) {
        log::warn!(
            "{} image sets is outside the usual {MIN_LORA_SETS}-{MAX_LORA_SETS}",
            records.len()
        );
    }
    lora.validate(base)?;
    let examples = prepare(records)?;
    let (adapter, start, optim) = match &io.resume {
        Some(p) => {
            let (adapter, meta, optim_t) = load_adapter(p)?;
            if &adapter.config != lora {
                return Err(Error::Invalid("resumed adapter has a different lora config".into()));
            }
            let state = resume_state(meta.train, config)?;
            let optim = OptimizerState::from_tensors(state.optim_step, &optim_t);
            (adapter, state.step, Some(optim))
        }
        None => (
            init_adapter(lora, base, &mut Rng::new(config.seed).fork(INIT_STREAM))?,
            0,
            None,
        ),
    };
    adapter.check_against(base)?;
    let flat = LoraPhase::flatten(&adapter);
    let optim = optim.unwrap_or_else(|| OptimizerState::new(&flat));
    optim.check(&flat)?;
    let mut phase = LoraPhase {
        base,
        config: lora.clone(),
        flat,
    };
    run(&mut phase, config, &examples, io, start, optim)
}
