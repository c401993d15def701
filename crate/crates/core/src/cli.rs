//! Command-line front end. [`dispatch`] parses arguments, runs one
//! subcommand and maps the outcome to an exit code: 0 on success, 1 on a
//! usage error, 2 on a data or validation error.

use std::error::Error;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::detect::{detect_defects, DetectorConfig, Label, SpreadMode};
use crate::metrics::{enface_projection_with, evaluate, to_gray8, LayerBounds, ProjectionStat, SsimConfig};
use crate::model::{
    infer_volume, load_checkpoint, save_checkpoint, train_with_progress, TrainConfig, TrainingSet, UNetConfig,
};
use crate::patch::{plan_stitch, SamplerConfig, StitchPlan};
use crate::repair::{annotated_projection_marked, repair_volume, RepairMode};
use crate::synth::{generate_phantom, inject_defects, DefectList, PhantomConfig, DEFAULT_MOTION_GAIN};
use crate::volume::{import_raw, normalize, pad_axial, read_volume, write_volume, Volume};

type CliResult = Result<(), Box<dyn Error + Send + Sync>>;

#[derive(Debug, Parser)]
#[command(name = "octa-restore", version, about = "Detect and regenerate defective OCTA B-scans")]
struct Cli {
    /// Worker threads for per-scan work (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Seed for every random choice; overrides seeds in config files.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a phantom OCT/OCTA pair with ground truth.
    Synth(SynthArgs),
    /// Label B-scans as intact or defective.
    Detect(DetectArgs),
    /// Print the patch placement and ownership for a scan width.
    Patchplan(PlanArgs),
    /// Train the translation network on volume pairs in a directory.
    Train(TrainArgs),
    /// Generate a full OCTA volume from OCT.
    Infer(InferArgs),
    /// Replace defective OCTA scans with generated ones.
    Repair(RepairArgs),
    /// Write an en-face projection as 8-bit grayscale PNG.
    Project(ProjectArgs),
    /// Compare two volumes (B-scan and projection MAE/MSE/SSIM).
    Eval(EvalArgs),
    /// Wrap a headerless float32 little-endian file as a volume.
    Import(ImportArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the phantom dims as `scans,axial,lateral`.
    #[arg(long, value_parser = parse_dims)]
    dims: Option<[usize; 3]>,
    #[arg(long)]
    out_oct: PathBuf,
    #[arg(long)]
    out_octa: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Defects to inject, e.g. `7:blink,12:motion`.
    #[arg(long, default_value = "")]
    defects: DefectList,
    #[arg(long, default_value_t = DEFAULT_MOTION_GAIN)]
    motion_gain: f32,
    /// Also write the noise-free flow volume.
    #[arg(long)]
    out_clean: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DetectorFlags {
    #[arg(long)]
    tau_l: Option<f64>,
    #[arg(long)]
    tau_u: Option<f64>,
    #[arg(long)]
    window_l: Option<usize>,
    #[arg(long)]
    window_u: Option<usize>,
    #[arg(long, value_parser = parse_spread)]
    spread: Option<SpreadMode>,
}

impl DetectorFlags {
    fn apply(&self, mut cfg: DetectorConfig) -> DetectorConfig {
        cfg.tau_l = self.tau_l.unwrap_or(cfg.tau_l);
        cfg.tau_u = self.tau_u.unwrap_or(cfg.tau_u);
        cfg.window_l = self.window_l.unwrap_or(cfg.window_l);
        cfg.window_u = self.window_u.unwrap_or(cfg.window_u);
        cfg.spread_mode = self.spread.unwrap_or(cfg.spread_mode);
        cfg
    }
}

#[derive(Debug, Args)]
struct DetectArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    flags: DetectorFlags,
    /// Labels JSON; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PlanArgs {
    #[arg(long)]
    width: usize,
    #[arg(long, default_value_t = 128)]
    patch: usize,
    #[arg(long, default_value_t = 5)]
    count: usize,
    #[arg(long, default_value_t = 8)]
    trim: usize,
}

#[derive(Debug, Args)]
struct StitchFlags {
    /// Patch width (defaults to the scan width when narrower than 128).
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long, default_value_t = 5)]
    count: usize,
    #[arg(long, default_value_t = 8)]
    trim: usize,
}

impl StitchFlags {
    fn plan(&self, width: usize) -> Result<StitchPlan, Box<dyn Error + Send + Sync>> {
        let w = self.patch.unwrap_or(128.min(width));
        Ok(plan_stitch(width, w, self.count, self.trim)?)
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Directory holding `<name>.oct.vol` / `<name>.octa.vol` pairs.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ucfg: Option<PathBuf>,
    #[arg(long)]
    tcfg: Option<PathBuf>,
    #[arg(long)]
    sampler: Option<PathBuf>,
    /// Skip scans this detector config labels defective.
    #[arg(long)]
    dconfig: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    smoothing_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patch_width: Option<usize>,
    #[arg(long)]
    patches_per_scan: Option<usize>,
    /// Keep at most this many training pairs.
    #[arg(long)]
    max_patches: Option<usize>,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    oct: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    stitch: StitchFlags,
}

#[derive(Debug, Args)]
struct RepairArgs {
    #[arg(long)]
    oct: PathBuf,
    #[arg(long)]
    octa: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dconfig: Option<PathBuf>,
    #[command(flatten)]
    flags: DetectorFlags,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    png: Option<PathBuf>,
    #[arg(long)]
    bounds: Option<PathBuf>,
    /// Write per-scan labels here.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = RepairMode::Both)]
    mode: RepairMode,
    #[command(flatten)]
    stitch: StitchFlags,
}

#[derive(Debug, Args)]
struct ProjectArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    bounds: Option<PathBuf>,
    #[arg(long, value_parser = parse_stat, default_value = "mean")]
    stat: ProjectionStat,
    #[arg(long)]
    png: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    bounds: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ImportArgs {
    #[arg(long)]
    raw: PathBuf,
    #[arg(long, value_parser = parse_dims)]
    dims: [usize; 3],
    #[arg(long)]
    out: PathBuf,
    /// Scale by the volume maximum after import.
    #[arg(long)]
    normalize: bool,
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|_| format!("expected scans,axial,lateral, got {s:?}"))
}

fn parse_spread(s: &str) -> Result<SpreadMode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_stat(s: &str) -> Result<ProjectionStat, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn read_json<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Box<dyn Error + Send + Sync>> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?)
}

fn write_json<T: Serialize + ?Sized>(value: &T, path: Option<&Path>) -> CliResult {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => fs::write(p, text + "\n").map_err(|e| format!("{}: {e}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn save_png<C>(img: &image::ImageBuffer<C, Vec<u8>>, path: &Path) -> CliResult
where
    C: image::PixelWithColorType<Subpixel = u8>,
{
    img.save(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(())
}

/// Pads the axial extent up to the next multiple of `divisor`.
fn pad_to_multiple(v: &Volume, divisor: usize) -> Result<Volume, Box<dyn Error + Send + Sync>> {
    let target = v.n_axial().div_ceil(divisor) * divisor;
    Ok(pad_axial(v, target)?)
}

fn crop_axial(v: &Volume, n_axial: usize) -> Volume {
    Volume {
        data: v.data.slice(ndarray::s![.., ..n_axial, ..]).to_owned(),
        meta: v.meta.clone(),
    }
}

fn run_synth(a: &SynthArgs, seed: Option<u64>) -> CliResult {
    let mut cfg: PhantomConfig = read_json(a.config.as_deref())?;
    cfg.seed = seed.unwrap_or(cfg.seed);
    cfg.dims = a.dims.unwrap_or(cfg.dims);
    let p = generate_phantom(&cfg)?;
    let (octa, truth) = inject_defects(&p.octa, &p.truth, &a.defects.0, a.motion_gain, cfg.seed)?;
    write_volume(&p.oct, &a.out_oct)?;
    write_volume(&octa, &a.out_octa)?;
    write_json(&truth.to_file(), Some(&a.truth))?;
    if let Some(path) = &a.out_clean {
        write_volume(&truth.clean_flow, path)?;
    }
    eprintln!(
        "phantom {:?} seed {} with {} injected defects",
        cfg.dims,
        cfg.seed,
        a.defects.0.len()
    );
    Ok(())
}

fn run_detect(a: &DetectArgs) -> CliResult {
    let cfg = a.flags.apply(read_json(a.config.as_deref())?);
    let v = read_volume(&a.input)?;
    let labels = detect_defects(&v, &cfg)?;
    let count = |l: Label| labels.iter().filter(|s| s.label == l).count();
    eprintln!(
        "{} scans: {} low, {} high",
        labels.len(),
        count(Label::LowDefect),
        count(Label::HighDefect)
    );
    write_json(&labels, a.out.as_deref())
}

#[derive(Serialize)]
struct PlanReport {
    width: usize,
    patch_width: usize,
    trim: usize,
    starts: Vec<usize>,
    ranges: Vec<(usize, usize)>,
    boundaries: Vec<(usize, usize)>,
}

fn run_patchplan(a: &PlanArgs) -> CliResult {
    let plan = plan_stitch(a.width, a.patch, a.count, a.trim)?;
    write_json(
        &PlanReport {
            width: plan.width,
            patch_width: plan.patch_width,
            trim: plan.trim,
            ranges: plan.ranges(),
            boundaries: plan.boundaries(),
            starts: plan.starts,
        },
        None,
    )
}

fn volume_pairs(dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>, Box<dyn Error + Send + Sync>> {
    let mut pairs = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    let mut names: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    names.sort();
    for p in names {
        let Some(stem) = p.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_suffix(".oct.vol")) else {
            continue;
        };
        let octa = dir.join(format!("{stem}.octa.vol"));
        if !octa.exists() {
            return Err(format!("{}: no matching {}", p.display(), octa.display()).into());
        }
        pairs.push((p, octa));
    }
    if pairs.is_empty() {
        return Err(format!("{}: no *.oct.vol / *.octa.vol pairs", dir.display()).into());
    }
    Ok(pairs)
}

fn run_train(a: &TrainArgs, seed: Option<u64>) -> CliResult {
    let ucfg: UNetConfig = read_json(a.ucfg.as_deref())?;
    let mut tcfg: TrainConfig = read_json(a.tcfg.as_deref())?;
    let mut sampler: SamplerConfig = read_json(a.sampler.as_deref())?;
    tcfg.seed = seed.unwrap_or(tcfg.seed);
    tcfg.epochs = a.epochs.unwrap_or(tcfg.epochs);
    tcfg.smoothing_epochs = a.smoothing_epochs.unwrap_or(tcfg.smoothing_epochs);
    tcfg.batch_size = a.batch_size.unwrap_or(tcfg.batch_size);
    tcfg.learning_rate = a.lr.unwrap_or(tcfg.learning_rate);
    sampler.width = a.patch_width.unwrap_or(sampler.width);
    sampler.count = a.patches_per_scan.unwrap_or(sampler.count);
    ucfg.validate()?;
    tcfg.validate()?;
    let dcfg: Option<DetectorConfig> = a.dconfig.as_deref().map(|p| read_json(Some(p))).transpose()?;

    let mut data = TrainingSet::default();
    for (k, (oct_path, octa_path)) in volume_pairs(&a.data)?.iter().enumerate() {
        let oct = normalize(&read_volume(oct_path)?);
        let octa = normalize(&read_volume(octa_path)?);
        let labels = dcfg.as_ref().map(|c| detect_defects(&octa, c)).transpose()?;
        let mut s = sampler;
        s.valid_rows = Some(s.valid_rows.unwrap_or(oct.n_axial()));
        let oct = pad_to_multiple(&oct, ucfg.divisor())?;
        let octa = pad_to_multiple(&octa, ucfg.divisor())?;
        let set = TrainingSet::from_volumes(
            &oct,
            &octa,
            labels.as_deref(),
            &s,
            tcfg.smoothing_epochs > 0,
            tcfg.seed.wrapping_add(k as u64),
        )?;
        data.samples.extend(set.samples);
    }
    if let Some(n) = a.max_patches {
        data.truncate(n);
    }
    eprintln!("training on {} patch pairs", data.len());
    let report = train_with_progress(&data, &ucfg, &tcfg, |e| {
        eprintln!(
            "epoch {:>3}  loss {:.6}{}",
            e.epoch,
            e.mean_loss,
            if e.smoothed_targets { "  (smoothed targets)" } else { "" }
        )
    })?;
    save_checkpoint(&report.params, &a.out)?;
    if let Some(log) = &a.log {
        fs::write(log, report.to_csv()).map_err(|e| format!("{}: {e}", log.display()))?;
    }
    Ok(())
}

fn run_infer(a: &InferArgs) -> CliResult {
    let params = load_checkpoint(&a.model)?;
    let oct = normalize(&read_volume(&a.oct)?);
    let padded = pad_to_multiple(&oct, params.config.divisor())?;
    let plan = a.stitch.plan(oct.n_lateral())?;
    let out = infer_volume(&params, &padded, &plan)?;
    write_volume(&crop_axial(&out, oct.n_axial()), &a.out)?;
    Ok(())
}

fn run_repair(a: &RepairArgs) -> CliResult {
    let dcfg = a.flags.apply(read_json(a.dconfig.as_deref())?);
    let params = load_checkpoint(&a.model)?;
    let oct = normalize(&read_volume(&a.oct)?);
    let octa = read_volume(&a.octa)?;
    let d = params.config.divisor();
    let plan = a.stitch.plan(oct.n_lateral())?;
    let out = repair_volume(
        &pad_to_multiple(&oct, d)?,
        &pad_to_multiple(&octa, d)?,
        &params,
        &dcfg,
        &plan,
        a.mode,
    )?;
    let repaired = crop_axial(&out.repaired, octa.n_axial());
    write_volume(&repaired, &a.out)?;
    eprintln!("replaced scans {:?}", out.replaced);
    if let Some(path) = &a.labels {
        write_json(&out.labels, Some(path))?;
    }
    if let Some(path) = &a.png {
        let bounds = a
            .bounds
            .as_deref()
            .map(|p| LayerBounds::load(p, repaired.dims()))
            .transpose()?;
        let img = annotated_projection_marked(&repaired, &out.replaced_mask(), bounds.as_ref())?;
        save_png(&img, path)?;
    }
    Ok(())
}

fn run_project(a: &ProjectArgs) -> CliResult {
    let v = read_volume(&a.input)?;
    let bounds = a.bounds.as_deref().map(|p| LayerBounds::load(p, v.dims())).transpose()?;
    let proj = enface_projection_with(&v, bounds.as_ref(), a.stat)?;
    save_png(&to_gray8(proj.view()), &a.png)
}

fn run_eval(a: &EvalArgs) -> CliResult {
    let va = read_volume(&a.a)?;
    let vb = read_volume(&a.b)?;
    let bounds = a.bounds.as_deref().map(|p| LayerBounds::load(p, va.dims())).transpose()?;
    let report = evaluate(&va, &vb, bounds.as_ref(), &SsimConfig::default())?;
    if a.report.is_some() {
        write_json(&report, a.report.as_deref())?;
    }
    write_json(&report, None)
}

fn run_import(a: &ImportArgs) -> CliResult {
    let mut v = import_raw(&a.raw, a.dims)?;
    if a.normalize {
        v = normalize(&v);
    }
    write_volume(&v, &a.out)?;
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    let seed = cli.seed;
    match &cli.command {
        Command::Synth(a) => run_synth(a, seed),
        Command::Detect(a) => run_detect(a),
        Command::Patchplan(a) => run_patchplan(a),
        Command::Train(a) => run_train(a, seed),
        Command::Infer(a) => run_infer(a),
        Command::Repair(a) => run_repair(a),
        Command::Project(a) => run_project(a),
        Command::Eval(a) => run_eval(a),
        Command::Import(a) => run_import(a),
    }
}

pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.unwrap_or(0))
        .build();
    let result = match pool {
        Ok(pool) => pool.install(|| run(cli)),
        Err(e) => Err(e.into()),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
