mod select;
mod signals;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use lginr_core::edit::{self, MirrorMode};
use lginr_core::partition::{auto_partition, plan_local_only, PlanRequest};
use lginr_core::{metrics, store, train};
use lginr_core::{
    Error as CoreError, FreezeMask, HistoryRecord, MergeKind, Model, ModelSpec,
    PartitionGrid, Rng, Signal, TrainConfig,
};

use select::{parse_list, parse_selection};
use signals::{load_signal, quantize, save_signal, LoadedSignal};

/// Value written where a cropped partition has no network.
const FILL: f32 = 0.0;
const THREADS_VAR: &str = "LGINR_THREADS";

#[derive(Parser)]
#[command(name = "lginr", version, about = "Local-global sine networks for images and audio")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a network to a PGM/PPM image or a WAV clip.
    Train(TrainArgs),
    /// Remove partitions from a model file.
    Crop(CropArgs),
    /// Grow the partition grid and fine-tune on a larger signal.
    Extend(ExtendArgs),
    /// Decode a model into an image or WAV file.
    Reconstruct(ReconstructArgs),
    /// Compare a model or signal against a reference signal.
    Eval(EvalArgs),
    /// Describe a model file.
    Info(InfoArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Arch {
    Siren,
    Spp,
    Lgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum Merge {
    ConcatFc,
    FcAdd,
}

impl From<Merge> for MergeKind {
    fn from(m: Merge) -> Self {
        match m {
            Merge::ConcatFc => MergeKind::ConcatFc,
            Merge::FcAdd => MergeKind::FcAdd,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mirror {
    Reflect,
    Replicate,
}

#[derive(Args)]
struct OptimArgs {
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    #[arg(long, default_value_t = 5e-4)]
    lr: f32,
    /// Separate learning rate for the local sub-networks.
    #[arg(long)]
    local_lr: Option<f32>,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f32,
    /// Fraction of each partition's samples drawn per step.
    #[arg(long, default_value_t = 1.0)]
    sample_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write a history record every N iterations.
    #[arg(long, default_value_t = 10)]
    log_every: usize,
    /// History file (JSON lines); defaults to `<out>.history.jsonl`.
    #[arg(long)]
    history: Option<PathBuf>,
}

impl OptimArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            iters: self.iters,
            lr: self.lr,
            local_lr: self.local_lr,
            weight_decay: self.weight_decay,
            sample_fraction: self.sample_fraction,
            seed: self.seed,
            log_every: self.log_every,
            ..TrainConfig::default()
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    signal: PathBuf,
    #[arg(long, value_enum, default_value = "lgs")]
    arch: Arch,
    /// Partitions per axis, e.g. `16,16`.
    #[arg(long)]
    factors: Option<String>,
    /// Width of a SIREN or SPP network.
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    local_hidden: Option<usize>,
    #[arg(long)]
    global_hidden: Option<usize>,
    #[arg(long, default_value_t = 5)]
    depth: usize,
    #[arg(long, default_value_t = 30.0)]
    omega: f32,
    #[arg(long, value_enum, default_value = "concat-fc")]
    merge: Merge,
    /// Use frequency 1 in the merge sine.
    #[arg(long)]
    unit_merge_frequency: bool,
    /// Pick factors and widths from a parameter budget.
    #[arg(long)]
    auto: bool,
    #[arg(long)]
    target_params: Option<usize>,
    #[arg(long, default_value_t = 0.11)]
    global_ratio: f64,
    /// Samples per partition along each axis, e.g. `32,32`.
    #[arg(long)]
    partition_size: Option<String>,
    #[command(flatten)]
    optim: OptimArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CropArgs {
    #[arg(long)]
    model: PathBuf,
    /// Flat indices (`0,5`) or per-axis ranges (`0..4,0..4`); groups
    /// separated by `;`.
    #[arg(long)]
    drop: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExtendArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    new_factors: String,
    /// Signal covering the whole extended grid.
    #[arg(long)]
    signal: PathBuf,
    #[arg(long, value_enum, default_value = "reflect")]
    mirror: Mirror,
    /// Keep the original partitions fixed while fine-tuning.
    #[arg(long)]
    freeze_old: bool,
    #[command(flatten)]
    optim: OptimArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    model: PathBuf,
    /// Output `.pgm`, `.ppm` or `.wav`.
    #[arg(long)]
    out: PathBuf,
    /// Samples per axis, e.g. `256,256`.
    #[arg(long, conflicts_with = "like")]
    resolution: Option<String>,
    /// Take the resolution (and sample rate) from this signal.
    #[arg(long)]
    like: Option<PathBuf>,
    #[arg(long, default_value_t = 16000)]
    sample_rate: u32,
}

#[derive(Args)]
struct EvalArgs {
    /// Reference signal.
    #[arg(long)]
    reference: PathBuf,
    #[arg(long, required_unless_present = "candidate")]
    model: Option<PathBuf>,
    /// Decoded signal to compare instead of a model.
    #[arg(long, conflicts_with = "model")]
    candidate: Option<PathBuf>,
    /// Skip quantizing model output to the reference's sample depth.
    #[arg(long)]
    raw: bool,
}

#[derive(Args)]
struct InfoArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    json: bool,
}

/// Command-line misuse detected after parsing.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match err.downcast_ref::<CoreError>() {
        Some(CoreError::Divergence { .. }) => 4,
        _ => 3,
    }
}

fn emit(value: &Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn history_path(explicit: &Option<PathBuf>, out: &Path) -> PathBuf {
    explicit.clone().unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".history.jsonl");
        PathBuf::from(s)
    })
}

fn write_history(path: &Path, history: &[HistoryRecord]) -> Result<()> {
    let mut text = String::new();
    for h in history {
        text.push_str(&serde_json::to_string(h)?);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn finite_or_null(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else if v > 0.0 {
        json!("inf")
    } else {
        Value::Null
    }
}

struct Quality {
    mse: f64,
    psnr: f64,
    ssim: Option<f64>,
}

fn quality(a: &Signal, b: &Signal) -> Result<Quality> {
    let mse = metrics::mse(a, b)?;
    Ok(Quality {
        mse,
        psnr: metrics::psnr_from_mse(mse),
        ssim: metrics::ssim(a, b).ok(),
    })
}

impl Quality {
    fn fields(&self, v: &mut Value) {
        v["mse"] = json!(self.mse);
        v["psnr"] = finite_or_null(self.psnr);
        v["ssim"] = self.ssim.map_or(Value::Null, |s| json!(s));
    }
}

fn spec_fields(spec: &ModelSpec) -> Value {
    json!({
        "arch": spec.kind.name(),
        "factors": spec.grid.factors(),
        "depth": spec.depth,
        "local_hidden": spec.local_hidden,
        "global_hidden": spec.global_hidden,
        "omega": spec.omega,
        "merge": if spec.has_global() { json!(spec.merge.name()) } else { Value::Null },
    })
}

fn build_spec(a: &TrainArgs, signal: &Signal) -> Result<ModelSpec> {
    let n = signal.dim();
    let m = signal.channels();
    let res = signal.resolution();
    let spec = if a.auto {
        let target = a
            .target_params
            .ok_or_else(|| usage("--auto needs --target-params"))?;
        match a.arch {
            Arch::Siren => {
                let h = (1..4096)
                    .take_while(|&h| {
                        lginr_core::model::local_block_params(n, m, h, a.depth) <= target
                    })
                    .last()
                    .ok_or_else(|| CoreError::InfeasiblePlan(format!("{target} parameters")))?;
                ModelSpec::siren(n, m, h, a.depth)?
            }
            Arch::Spp | Arch::Lgs => {
                let size = parse_list(
                    a.partition_size
                        .as_deref()
                        .ok_or_else(|| usage("--auto needs --partition-size"))?,
                )?;
                if a.arch == Arch::Spp {
                    let plan = plan_local_only(target, &size, res, a.depth, m)?;
                    let grid = PartitionGrid::unit(plan.factors)?;
                    ModelSpec::spp(n, m, plan.local_hidden_dim, a.depth, grid)?
                } else {
                    let plan = auto_partition(&PlanRequest {
                        target_total_params: target,
                        target_global_ratio: a.global_ratio,
                        target_partition_size: &size,
                        signal_resolution: res,
                        depth: a.depth,
                        out_dim: m,
                        merge: a.merge.into(),
                    })?;
                    let grid = PartitionGrid::unit(plan.factors)?;
                    ModelSpec::lgs(
                        n,
                        m,
                        plan.local_hidden_dim,
                        plan.global_hidden_dim,
                        a.depth,
                        grid,
                    )?
                }
            }
        }
    } else {
        let factors = || -> Result<PartitionGrid> {
            let f = a
                .factors
                .as_deref()
                .ok_or_else(|| usage("--factors is required without --auto"))?;
            Ok(PartitionGrid::unit(parse_list(f)?)?)
        };
        match a.arch {
            Arch::Siren => ModelSpec::siren(
                n,
                m,
                a.hidden.ok_or_else(|| usage("siren needs --hidden"))?,
                a.depth,
            )?,
            Arch::Spp => ModelSpec::spp(
                n,
                m,
                a.hidden
                    .or(a.local_hidden)
                    .ok_or_else(|| usage("spp needs --hidden"))?,
                a.depth,
                factors()?,
            )?,
            Arch::Lgs => ModelSpec::lgs(
                n,
                m,
                a.local_hidden.ok_or_else(|| usage("lgs needs --local-hidden"))?,
                a.global_hidden.ok_or_else(|| usage("lgs needs --global-hidden"))?,
                a.depth,
                factors()?,
            )?,
        }
    };
    let spec = spec
        .with_omega(a.omega)?
        .with_merge(a.merge.into())
        .with_merge_unit_frequency(a.unit_merge_frequency);
    if spec.grid.dim() != n {
        bail!(usage(format!(
            "{} factors for a {n}-dimensional signal",
            spec.grid.dim()
        )));
    }
    Ok(spec)
}

/// Fits, writes model and history, and returns the summary record.
fn fit_and_save(
    model: &mut Model,
    signal: &Signal,
    optim: &OptimArgs,
    freeze: Option<&FreezeMask>,
    out: &Path,
) -> Result<Value> {
    let history = train::fit(model, signal, &optim.config(), freeze)?;
    store::save(model, out).with_context(|| format!("writing {}", out.display()))?;
    let hpath = history_path(&optim.history, out);
    write_history(&hpath, &history)?;
    let (recon, _) = train::reconstruct(model, signal.resolution(), FILL)?;
    let q = quality(&recon, signal)?;
    let b = model.breakdown();
    let mut v = spec_fields(model.spec());
    v["params"] = json!(model.param_count());
    v["global_params"] = json!(b.global_weights());
    v["local_params"] = json!(b.local_weights());
    v["iters"] = json!(optim.iters);
    v["seed"] = json!(optim.seed);
    v["elapsed_secs"] = json!(history.last().map_or(0.0, |h| h.elapsed_secs));
    v["model"] = json!(out);
    v["history"] = json!(hpath);
    q.fields(&mut v);
    Ok(v)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let signal = load_signal(&a.signal)?.signal;
    let spec = build_spec(&a, &signal)?;
    let mut model = Model::init(spec, &mut Rng::new(a.optim.seed))?;
    let mut v = fit_and_save(&mut model, &signal, &a.optim, None, &a.out)?;
    v["command"] = json!("train");
    emit(&v)
}

fn cmd_crop(a: CropArgs) -> Result<()> {
    let bytes = fs::read(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let header = store::read_header(&bytes)?;
    let drop = parse_selection(&a.drop, header.spec.grid.factors()).map_err(|e| usage(e.to_string()))?;
    let old = header.shared_len / 4 + header.mask.kept_count() * header.block_len / 4;
    store::crop_file(&a.model, &drop, &a.out)?;
    let new = old - drop.len() * header.block_len / 4;
    emit(&json!({
        "command": "crop",
        "dropped": drop,
        "old_params": old,
        "new_params": new,
        "kept_partitions": header.mask.kept_count() - drop.len(),
        "model": a.out,
    }))
}

fn cmd_extend(a: ExtendArgs) -> Result<()> {
    let model = store::load(&a.model)?;
    let factors = parse_list(&a.new_factors).map_err(|e| usage(e.to_string()))?;
    if factors == model.grid().factors() {
        eprintln!("warning: factors unchanged, the model is only fine-tuned");
    }
    let mode = match a.mirror {
        Mirror::Reflect => MirrorMode::Reflect,
        Mirror::Replicate => MirrorMode::Replicate,
    };
    let ext = edit::extend(&model, &factors, None, mode)?;
    let signal = load_signal(&a.signal)?.signal;
    let mut grown = ext.model;
    let freeze = a.freeze_old.then_some(&ext.old_partitions);
    let mut v = fit_and_save(&mut grown, &signal, &a.optim, freeze, &a.out)?;
    v["command"] = json!("extend");
    v["old_factors"] = json!(model.grid().factors());
    v["bounds_min"] = json!(grown.grid().bounds().min());
    v["bounds_max"] = json!(grown.grid().bounds().max());
    emit(&v)
}

fn cmd_reconstruct(a: ReconstructArgs) -> Result<()> {
    let model = store::load(&a.model)?;
    let (resolution, rate) = match (&a.resolution, &a.like) {
        (Some(r), _) => (parse_list(r).map_err(|e| usage(e.to_string()))?, a.sample_rate),
        (None, Some(p)) => {
            let s = load_signal(p)?;
            (s.signal.resolution().to_vec(), s.sample_rate.unwrap_or(a.sample_rate))
        }
        (None, None) => bail!(usage("give --resolution or --like")),
    };
    let (signal, dropped) = train::reconstruct(&model, &resolution, FILL)?;
    save_signal(&signal, &a.out, rate)?;
    let cropped: Vec<usize> = (0..model.mask().len())
        .filter(|&k| !model.mask().is_present(k))
        .collect();
    emit(&json!({
        "command": "reconstruct",
        "resolution": resolution,
        "out": a.out,
        "fill": FILL,
        "dropped_samples": dropped,
        "cropped_partitions": cropped,
    }))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let LoadedSignal { signal: reference, sample_rate } = load_signal(&a.reference)?;
    let candidate = match (&a.model, &a.candidate) {
        (_, Some(p)) => load_signal(p)?.signal,
        (Some(p), None) => {
            let model = store::load(p)?;
            let (s, _) = train::reconstruct(&model, reference.resolution(), FILL)?;
            if a.raw {
                s
            } else {
                quantize(&s, &a.reference, sample_rate)?
            }
        }
        (None, None) => bail!(usage("give --model or --candidate")),
    };
    let q = quality(&candidate, &reference)?;
    let mut v = json!({ "command": "eval", "reference": a.reference });
    q.fields(&mut v);
    emit(&v)
}

fn cmd_info(a: InfoArgs) -> Result<()> {
    let bytes = fs::read(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let h = store::read_header(&bytes)?;
    let shared = h.shared_len / 4;
    let per = h.block_len / 4;
    let (k, kept) = (h.mask.len(), h.mask.kept_count());
    let mut table: Vec<usize> = (0..=4).map(|q| q * (k - 1) / 4).collect();
    table.dedup();
    let rows: Vec<(usize, usize)> = table.iter().map(|&c| (c, shared + (k - c) * per)).collect();
    if a.json {
        let mut v = spec_fields(&h.spec);
        v["command"] = json!("info");
        v["file_bytes"] = json!(bytes.len());
        v["header_bytes"] = json!(h.header_len);
        v["params"] = json!(shared + kept * per);
        v["global_merge_params"] = json!(shared);
        v["per_partition_params"] = json!(per);
        v["partitions"] = json!(k);
        v["kept_partitions"] = json!(kept);
        v["bounds_min"] = json!(h.spec.grid.bounds().min());
        v["bounds_max"] = json!(h.spec.grid.bounds().max());
        v["crop_table"] = rows
            .iter()
            .map(|&(c, p)| json!({"cropped": c, "params": p}))
            .collect();
        return emit(&v);
    }
    let s = &h.spec;
    let mut out = std::io::stdout().lock();
    writeln!(
        out,
        "{} n={} m={} depth={} h_l={} h_g={} omega={} merge={}{}",
        s.kind.name(),
        s.in_dim,
        s.out_dim,
        s.depth,
        s.local_hidden,
        s.global_hidden,
        s.omega,
        s.merge.name(),
        if s.merge_unit_frequency { " (unit frequency)" } else { "" }
    )?;
    writeln!(
        out,
        "factors {:?}, bounds {:?}..{:?}",
        s.grid.factors(),
        s.grid.bounds().min(),
        s.grid.bounds().max()
    )?;
    writeln!(out, "global+merge: {shared}, per-partition: {per}, partitions: {kept}/{k}")?;
    writeln!(out, "params: {} ({} bytes on disk)", shared + kept * per, bytes.len())?;
    writeln!(out, "cropped  params")?;
    for (c, p) in rows {
        writeln!(out, "{c:>7}  {p}")?;
    }
    Ok(())
}

fn check_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_VAR) {
        match v.trim().parse::<usize>() {
            Ok(1) => {}
            Ok(n) if n > 1 => eprintln!("warning: {THREADS_VAR}={n} ignored, running on one thread"),
            _ => bail!(usage(format!("{THREADS_VAR} must be a positive integer, got {v:?}"))),
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    check_threads()?;
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Crop(a) => cmd_crop(a),
        Command::Extend(a) => cmd_extend(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Info(a) => cmd_info(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
