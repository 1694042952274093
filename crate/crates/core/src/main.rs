use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use serde_json::Value;

use iclora::canvas::{compose, Canvas, PanelLayout, PanelMask};
use iclora::checkpoint::{load_adapter, load_model, write_atomic};
use iclora::dit::{ModelConfig, ModelParams};
use iclora::experiment::{run_experiment, ExperimentConfig};
use iclora::lora::{LoraAdapter, LoraConfig};
use iclora::output::{read_sets, write_set, RunManifest};
use iclora::prompt::{null_prompt, tokenize, PromptProgram, TokenSeq};
use iclora::sampler::{sample, sdedit_inpaint, InpaintSpec, SamplerConfig};
use iclora::synth::{evaluate, gen_dataset, read_dataset, write_dataset, TaskName, TaskSpec, MANIFEST};
use iclora::trainer::{train_base, train_lora, Phase, TrainConfig, TrainIo};

#[derive(Parser)]
#[command(
    name = "iclora",
    version,
    about = "Panel-canvas diffusion with in-context LoRA tuning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of image sets.
    GenData(GenDataArgs),
    /// Pretrain the base model.
    TrainBase(TrainArgs),
    /// Tune a LoRA adapter on a frozen base.
    TrainLora(TrainLoraArgs),
    /// Sample one image set from a prompt.
    Generate(GenerateArgs),
    /// Regenerate masked panels of a reference set.
    Inpaint(InpaintArgs),
    /// Score generated sets with the task's consistency metric.
    Eval(EvalArgs),
    /// Run the full pretrain / tune / sample / score pipeline.
    Experiment(ExperimentArgs),
}

#[derive(Args, Serialize)]
struct GenDataArgs {
    #[arg(long)]
    task: TaskName,
    #[arg(long)]
    sets: usize,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    layout: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    /// JSON file of defaults; flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    steps: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    batch: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    weight_decay: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    grad_clip: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint_every: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    resume: Option<PathBuf>,
    /// JSON-lines training log (default: next to the checkpoint).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    log: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct TrainLoraArgs {
    #[command(flatten)]
    #[serde(flatten)]
    train: TrainArgs,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    base: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    rank: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
}

#[derive(Args, Serialize)]
struct SamplingArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    base: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    lora: Option<PathBuf>,
    /// Prompt program JSON file.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    prompt: Option<PathBuf>,
    /// Panel layout such as 2x2 or 1x2@32x48.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    layout: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    steps: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    guidance: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct GenerateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    sampling: SamplingArgs,
}

#[derive(Args, Serialize)]
struct InpaintArgs {
    #[command(flatten)]
    #[serde(flatten)]
    sampling: SamplingArgs,
    /// A canvas PNG, or comma-separated panel PNGs in layout order.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    reference: Option<String>,
    /// Panels to regenerate, e.g. "TL,TR" or "TOP-RIGHT,BOTTOM-RIGHT".
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    mask: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    strength: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    task: TaskName,
    /// Directory of generated set directories, or a dataset directory.
    #[arg(long)]
    dir: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Working directory for checkpoints, samples and the report.
    #[arg(long)]
    work: PathBuf,
    /// JSON file overriding experiment settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the small smoke-test preset instead of the full one.
    #[arg(long)]
    smoke: bool,
}

/// Failure classes mapped onto the exit code contract.
enum Failure {
    Usage(String),
    Runtime(iclora::Error),
}

impl From<iclora::Error> for Failure {
    fn from(e: iclora::Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(Failure::Usage(msg.into()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let res = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainBase(a) => cmd_train_base(a),
        Command::TrainLora(a) => cmd_train_lora(a),
        Command::Generate(a) => generate(a),
        Command::Inpaint(a) => inpaint(a),
        Command::Eval(a) => eval(a),
        Command::Experiment(a) => experiment(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn merge(into: &mut Value, from: Value) {
    match (into, from) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                merge(a.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Resolves flags over an optional config file over `defaults`.
fn resolve<T: Serialize + DeserializeOwned>(defaults: T, file: Option<&Path>, flags: &impl Serialize) -> CliResult<T> {
    let mut v = serde_json::to_value(defaults).expect("plain config");
    if let Some(p) = file {
        let text = std::fs::read(p).map_err(|e| iclora::Error::io(p, e))?;
        let file_v: Value = match serde_json::from_slice(&text) {
            Ok(v) => v,
            Err(e) => return usage(format!("{}: {e}", p.display())),
        };
        merge(&mut v, file_v);
    }
    merge(&mut v, serde_json::to_value(flags).expect("plain flags"));
    serde_json::from_value(v).or_else(|e| usage(format!("bad configuration: {e}")))
}

fn required<T>(v: Option<T>, flag: &str) -> CliResult<T> {
    v.map_or_else(|| usage(format!("--{flag} is required")), Ok)
}

fn parse_layout(s: &str) -> CliResult<PanelLayout> {
    PanelLayout::parse(s).or_else(|e| usage(e.to_string()))
}

fn gen_data(a: GenDataArgs) -> CliResult<()> {
    let start = Instant::now();
    let mut spec = TaskSpec::new(a.task);
    if let Some(l) = &a.layout {
        spec = spec.with_layout(parse_layout(l)?).or_else(|e| usage(e.to_string()))?;
    }
    if a.sets == 0 {
        return usage("--sets must be positive");
    }
    let records = gen_dataset(&spec, a.sets, a.seed)?;
    write_dataset(&a.out, &records)?;
    let mut m = RunManifest::new("gen-data", serde_json::to_value(&a).expect("args"), Some(a.seed));
    m.output(&a.out.join(MANIFEST))?;
    m.wall_ms = start.elapsed().as_millis() as u64;
    m.write(&a.out.join("run.json"))?;
    log::info!("wrote {} sets to {}", records.len(), a.out.display());
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct TrainResolved {
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    resume: Option<PathBuf>,
    log: Option<PathBuf>,
    #[serde(flatten)]
    train: TrainConfig,
    #[serde(default)]
    model: ModelConfig,
    // lora phase only
    #[serde(default, skip_serializing_if = "Option::is_none")]
    base: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
}

fn train_defaults(phase: Phase) -> TrainResolved {
    TrainResolved {
        data: None,
        out: None,
        resume: None,
        log: None,
        train: TrainConfig::for_phase(phase),
        model: ModelConfig::default(),
        base: None,
        rank: (phase == Phase::Lora).then_some(iclora::lora::DEFAULT_RANK),
        alpha: None,
    }
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_train_base(a: TrainArgs) -> CliResult<()> {
    let start = Instant::now();
    let r: TrainResolved = resolve(train_defaults(Phase::Base), a.config.as_deref(), &a)?;
    if r.train.phase != Phase::Base {
        return usage("train-base needs phase base");
    }
    let data = required(r.data.clone(), "data")?;
    let out = required(r.out.clone(), "out")?;
    r.model.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    r.train.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let records = read_dataset(&data)?;
    let io = TrainIo {
        out: out.clone(),
        log: Some(r.log.clone().unwrap_or_else(|| sidecar(&out, ".log.jsonl"))),
        resume: r.resume.clone(),
        stop_after: None,
    };
    let summary = train_base(&r.train, &r.model, &records, &io)?;
    let mut m = RunManifest::new(
        "train-base",
        serde_json::to_value(&r).expect("config"),
        Some(r.train.seed),
    );
    m.input(&data.join(MANIFEST))?;
    if let Some(p) = &r.resume {
        m.input(p)?;
    }
    m.output(&out)?;
    m.wall_ms = start.elapsed().as_millis() as u64;
    m.write(&sidecar(&out, ".run.json"))?;
    log::info!(
        "trained {} steps; loss {:?} -> {:?}",
        summary.steps,
        summary.first_loss,
        summary.final_loss
    );
    Ok(())
}

fn cmd_train_lora(a: TrainLoraArgs) -> CliResult<()> {
    let start = Instant::now();
    let r: TrainResolved = resolve(train_defaults(Phase::Lora), a.train.config.as_deref(), &a)?;
    if r.train.phase != Phase::Lora {
        return usage("train-lora needs phase lora");
    }
    let base_path = required(r.base.clone(), "base")?;
    let data = required(r.data.clone(), "data")?;
    let out = required(r.out.clone(), "out")?;
    r.train.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let (base, _, _) = load_model(&base_path)?;
    let rank = r.rank.unwrap_or(iclora::lora::DEFAULT_RANK);
    let mut lcfg = LoraConfig::all_projections(&base.config, rank);
    if let Some(alpha) = r.alpha {
        lcfg.alpha = alpha;
    }
    let records = read_dataset(&data)?;
    let io = TrainIo {
        out: out.clone(),
        log: Some(r.log.clone().unwrap_or_else(|| sidecar(&out, ".log.jsonl"))),
        resume: r.resume.clone(),
        stop_after: None,
    };
    let summary = train_lora(&r.train, &base, &records, &lcfg, &io)?;
    let mut cfg = serde_json::to_value(&r).expect("config");
    cfg["model"] = serde_json::to_value(&base.config).expect("config");
    cfg["lora"] = serde_json::to_value(&lcfg).expect("config");
    let mut m = RunManifest::new("train-lora", cfg, Some(r.train.seed));
    m.input(&base_path)?;
    m.input(&data.join(MANIFEST))?;
    m.output(&out)?;
    m.wall_ms = start.elapsed().as_millis() as u64;
    m.write(&sidecar(&out, ".run.json"))?;
    log::info!(
        "tuned {} steps; loss {:?} -> {:?}",
        summary.steps,
        summary.first_loss,
        summary.final_loss
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct SamplingResolved {
    base: Option<PathBuf>,
    lora: Option<PathBuf>,
    prompt: Option<PathBuf>,
    layout: String,
    seed: u64,
    steps: usize,
    guidance: f64,
    out: Option<PathBuf>,
    // inpainting only
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reference: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    strength: Option<f64>,
}

impl Default for SamplingResolved {
    fn default() -> Self {
        let s = SamplerConfig::default();
        Self {
            base: None,
            lora: None,
            prompt: None,
            layout: "2x2".into(),
            seed: s.seed,
            steps: s.steps,
            guidance: s.guidance,
            out: None,
            reference: None,
            mask: None,
            strength: None,
        }
    }
}

struct Loaded {
    params: ModelParams,
    adapter: Option<LoraAdapter>,
    layout: PanelLayout,
    prompt: Option<PromptProgram>,
    text: TokenSeq,
    cfg: SamplerConfig,
    out: PathBuf,
}

fn load_for_sampling(r: &SamplingResolved, m: &mut RunManifest) -> CliResult<Loaded> {
    let base = required(r.base.clone(), "base")?;
    let out = required(r.out.clone(), "out")?;
    let layout = parse_layout(&r.layout)?;
    let cfg = SamplerConfig {
        steps: r.steps,
        guidance: r.guidance,
        seed: r.seed,
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let (params, _, _) = load_model(&base)?;
    m.input(&base)?;
    let adapter = match &r.lora {
        Some(p) => {
            m.input(p)?;
            Some(load_adapter(p)?.0)
        }
        None => None,
    };
    let prompt = match &r.prompt {
        Some(p) => {
            m.input(p)?;
            let text = std::fs::read_to_string(p).map_err(|e| iclora::Error::io(p, e))?;
            Some(PromptProgram::from_json(&text)?)
        }
        None => None,
    };
    let text = match &prompt {
        Some(p) => tokenize(p, &layout)?,
        None => null_prompt(),
    };
    Ok(Loaded {
        params,
        adapter,
        layout,
        prompt,
        text,
        cfg,
        out,
    })
}

fn finish_sampling(l: &Loaded, canvas: &Canvas, mut m: RunManifest, start: Instant) -> CliResult<()> {
    for p in write_set(&l.out, canvas, &l.layout, l.prompt.as_ref())? {
        m.output(&p)?;
    }
    m.wall_ms = start.elapsed().as_millis() as u64;
    m.write(&l.out.join("run.json"))?;
    log::info!("wrote {}", l.out.display());
    Ok(())
}

fn generate(a: GenerateArgs) -> CliResult<()> {
    let start = Instant::now();
    let r: SamplingResolved = resolve(SamplingResolved::default(), a.sampling.config.as_deref(), &a)?;
    let mut m = RunManifest::new("generate", serde_json::to_value(&r).expect("config"), Some(r.seed));
    let l = load_for_sampling(&r, &mut m)?;
    let canvas = sample(&l.params, l.adapter.as_ref(), &l.text, &l.cfg, &l.layout)?;
    finish_sampling(&l, &canvas, m, start)
}

fn load_reference(spec: &str, layout: &PanelLayout) -> CliResult<Canvas> {
    let parts: Vec<&str> = spec.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    match parts.as_slice() {
        [one] => {
            let c = Canvas::load_png(one)?;
            if (c.height(), c.width()) != (layout.height(), layout.width()) {
                return usage(format!(
                    "reference is {}x{} but layout {layout} needs {}x{}",
                    c.height(),
                    c.width(),
                    layout.height(),
                    layout.width()
                ));
            }
            Ok(c)
        }
        many if many.len() == layout.len() => {
            let panels = many.iter().map(Canvas::load_png).collect::<Result<Vec<_>, _>>()?;
            compose(&panels, layout).map_err(|e| Failure::Usage(e.to_string()))
        }
        _ => usage(format!("--reference needs one canvas or {} panels", layout.len())),
    }
}

fn inpaint(a: InpaintArgs) -> CliResult<()> {
    let start = Instant::now();
    let r: SamplingResolved = resolve(
        SamplingResolved {
            strength: Some(1.0),
            ..Default::default()
        },
        a.sampling.config.as_deref(),
        &a,
    )?;
    let mut m = RunManifest::new("inpaint", serde_json::to_value(&r).expect("config"), Some(r.seed));
    let l = load_for_sampling(&r, &mut m)?;
    let reference = load_reference(&required(r.reference.clone(), "reference")?, &l.layout)?;
    for p in r.reference.iter().flat_map(|s| s.split(',')) {
        m.input(Path::new(p.trim()))?;
    }
    let mask = PanelMask::parse(l.layout.clone(), &required(r.mask.clone(), "mask")?)
        .map_err(|e| Failure::Usage(e.to_string()))?;
    if mask.is_empty() {
        return usage("--mask selects no panels");
    }
    let spec = InpaintSpec {
        strength: r.strength.unwrap_or(1.0),
        ..InpaintSpec::new(reference, mask)
    };
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let canvas = sdedit_inpaint(&l.params, l.adapter.as_ref(), &l.text, &spec, &l.cfg)?;
    finish_sampling(&l, &canvas, m, start)
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let sets = if a.dir.join(MANIFEST).is_file() {
        read_dataset(&a.dir)?
            .into_iter()
            .map(|r| (r.panels, Some(r.prompt)))
            .collect()
    } else {
        read_sets(&a.dir)?
    };
    let report = match evaluate(a.task, &sets) {
        Ok(r) => r,
        Err(iclora::Error::Invalid(m)) if a.task == TaskName::Mixed => return usage(m),
        Err(e) => return Err(e.into()),
    };
    write_atomic(
        &a.report,
        &serde_json::to_vec_pretty(&report).map_err(iclora::Error::from)?,
    )?;
    log::info!("{}: rate {:.3} over {} sets", report.metric, report.rate, report.count);
    Ok(())
}

fn experiment(a: ExperimentArgs) -> CliResult<()> {
    let preset = if a.smoke {
        ExperimentConfig::smoke()
    } else {
        ExperimentConfig::full()
    };
    let cfg: ExperimentConfig = resolve(preset, a.config.as_deref(), &Value::Object(Default::default()))?;
    let report = run_experiment(&cfg, &a.work)?;
    for c in &report.criteria {
        log::info!(
            "criterion {}: {} ({})",
            c.id,
            if c.pass { "PASS" } else { "FAIL" },
            c.detail
        );
    }
    Ok(())
}
