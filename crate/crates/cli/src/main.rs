use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cfdprop::config::RunConfig;
use cfdprop::data::{
    degrade, load_sequence, read_png, save_sequence, synth_sequence, write_png, Degradation, Motion, SynthSpec,
    VideoSequence,
};
use cfdprop::flow::FlowSource;
use cfdprop::gradcheck::run_suite;
use cfdprop::metrics::{evaluate, profile_image, temporal_profile, ChannelMode, ParamReport};
use cfdprop::model::{load_checkpoint, CfdModel, ModelConfig};
use cfdprop::train::{clip_flows, resolve_flows, train_run};
use clap::{Args, Parser, Subcommand, ValueEnum};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_GRADCHECK: u8 = 3;

/// Video super-resolution with discriminative, collaborative feedback propagation.
#[derive(Parser, Debug)]
#[command(name = "cfdprop", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic clip (LR, HR and ground-truth flows).
    Synth(SynthArgs),
    /// Downscale a folder of HR frames into an LR/HR sequence.
    Degrade(DegradeArgs),
    /// Train from a JSON run config.
    Train(TrainArgs),
    /// Upscale a sequence with a checkpoint (or freshly initialized weights).
    Infer(InferArgs),
    /// Compare two folders of frames: PSNR and SSIM.
    Eval(EvalArgs),
    /// Write the temporal profile of a clip as a PNG.
    Profile(ProfileArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Print parameter count and FLOPs.
    Params(ParamsArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 5)]
    frames: usize,
    /// LR frame size; `32` or `48x32` (height x width).
    #[arg(long, default_value = "32", value_parser = parse_size)]
    size: (usize, usize),
    /// Per-frame translation `dx,dy` in LR pixels.
    #[arg(long, value_parser = parse_pair, conflicts_with = "rotate")]
    motion: Option<(f64, f64)>,
    /// Per-frame rotation in degrees instead of a translation.
    #[arg(long)]
    rotate: Option<f64>,
    #[arg(long, value_enum, default_value_t = DegradationArg::Bi)]
    degradation: DegradationArg,
    #[arg(long, default_value_t = 24)]
    components: usize,
    #[arg(long, default_value_t = 0.25)]
    max_frequency: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DegradeArgs {
    /// Folder of HR PNGs, or a manifest. A manifest listing HR frames is
    /// degraded from those, otherwise its frames are taken as HR.
    #[arg(long)]
    hr: PathBuf,
    #[arg(long, value_enum, default_value_t = DegradationArg::Bi)]
    kind: DegradationArg,
    #[arg(long, default_value_t = 4)]
    scale: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Run config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `training.steps`.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InferArgs {
    /// Manifest, or a folder containing `manifest.json`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Run config supplying the model (without a checkpoint) and LK settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Init seed when no checkpoint is given.
    #[arg(long)]
    seed: Option<u64>,
    /// Defaults to the manifest's flow files when present, else estimation.
    #[arg(long, value_enum)]
    flow: Option<FlowArg>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Folder of output PNGs.
    #[arg(long)]
    a: PathBuf,
    /// Folder of reference PNGs.
    #[arg(long)]
    b: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Y)]
    mode: ModeArg,
    /// Also write the report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ProfileArgs {
    /// Folder of PNGs, or a manifest (its LR frames).
    #[arg(long)]
    input: PathBuf,
    /// Row to slice; defaults to the middle row.
    #[arg(long)]
    row: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "gradcheck_report.json")]
    report: PathBuf,
}

#[derive(Args, Debug)]
struct ParamsArgs {
    /// Take the model from a run config instead of the full-size default.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DegradationArg {
    Bi,
    Bd,
}

impl From<DegradationArg> for Degradation {
    fn from(d: DegradationArg) -> Self {
        match d {
            DegradationArg::Bi => Degradation::Bi,
            DegradationArg::Bd => Degradation::Bd,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FlowArg {
    Estimate,
    Files,
    GroundTruth,
}

impl From<FlowArg> for FlowSource {
    fn from(f: FlowArg) -> Self {
        match f {
            FlowArg::Estimate => FlowSource::Estimate,
            FlowArg::Files => FlowSource::Files,
            FlowArg::GroundTruth => FlowSource::GroundTruth,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Y,
    Rgb,
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("expected `dx,dy`, got `{s}`"))?;
    let num = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("`{t}`: {e}"));
    Ok((num(a)?, num(b)?))
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let num = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("`{t}`: {e}"));
    match s.split_once('x') {
        Some((h, w)) => Ok((num(h)?, num(w)?)),
        None => num(s).map(|n| (n, n)),
    }
}

/// A failure and the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<cfdprop::Error> for Failure {
    fn from(e: cfdprop::Error) -> Self {
        let code = match &e {
            cfdprop::Error::Config(_) => EXIT_USAGE,
            cfdprop::Error::File { source, .. } if source.kind() == std::io::ErrorKind::NotFound => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        // a config that cannot be read is a usage error, whatever the cause
        Some(p) => RunConfig::load(p).map_err(|e| Failure::usage(e.to_string())),
        None => Ok(RunConfig::default()),
    }
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("manifest.json")
    } else {
        p.to_path_buf()
    }
}

/// PNG files directly inside `dir`, sorted by name.
fn png_files(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let entries = fs::read_dir(dir).map_err(|e| Failure::usage(format!("{}: {e}", dir.display())))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|e| Failure::usage(format!("{}: {e}", dir.display())))?
            .path();
        if path.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Failure::usage(format!("{}: no PNG files", dir.display())));
    }
    Ok(files)
}

fn read_png_dir(dir: &Path) -> Result<Vec<cfdprop::tensor::Tensor>, Failure> {
    png_files(dir)?
        .iter()
        .map(|p| read_png(p).map_err(Failure::from))
        .collect()
}

/// HR frames from a folder of PNGs or a manifest's frame list.
fn read_frames(input: &Path) -> Result<VideoSequence, Failure> {
    if input.is_dir() && !input.join("manifest.json").exists() {
        let name = input
            .file_name()
            .map_or("sequence".into(), |n| n.to_string_lossy().into_owned());
        Ok(VideoSequence::new(name, read_png_dir(input)?)?)
    } else {
        let m = manifest_path(input);
        if !m.exists() {
            return Err(Failure::usage(format!("{}: no such file", m.display())));
        }
        Ok(load_sequence(m)?)
    }
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let motion = match (a.motion, a.rotate) {
        (_, Some(degrees)) => Motion::RotateTexture { degrees },
        (Some((dx, dy)), None) => Motion::Translate { dx, dy },
        (None, None) => Motion::default(),
    };
    let spec = SynthSpec {
        motion,
        frames: a.frames,
        height: a.size.0,
        width: a.size.1,
        components: a.components,
        max_frequency: a.max_frequency,
        degradation: a.degradation.into(),
        seed: a.seed,
    };
    spec.validate().map_err(|e| Failure::usage(e.to_string()))?;
    let seq = synth_sequence(&spec)?;
    let manifest = save_sequence(&seq, &a.out)?;
    println!(
        "wrote {} frames of {}x{} to {}",
        seq.len(),
        spec.height,
        spec.width,
        manifest.display()
    );
    Ok(())
}

fn cmd_degrade(a: DegradeArgs) -> CmdResult {
    if a.scale == 0 {
        return Err(Failure::usage("--scale must be positive"));
    }
    let mut hr = read_frames(&a.hr)?;
    if let Some(frames) = hr.hr.take() {
        hr = VideoSequence::new(hr.name, frames)?;
    }
    let seq = degrade(&hr, a.kind.into(), a.scale)?;
    let manifest = save_sequence(&seq, &a.out)?;
    let (h, w) = seq.size();
    println!("wrote {} frames of {h}x{w} to {}", seq.len(), manifest.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let mut run = load_config(a.config.as_deref())?;
    if let Some(steps) = a.steps {
        run.training.steps = steps;
    }
    run.validate().map_err(|e| Failure::usage(e.to_string()))?;
    fs::create_dir_all(&a.out).map_err(|e| Failure::usage(format!("{}: {e}", a.out.display())))?;
    let effective = a.out.join("effective_config.json");
    fs::write(&effective, run.to_json()).map_err(|e| cfdprop::Error::File {
        path: effective,
        source: e,
    })?;
    let (_, summary) = train_run(&run, &a.out)?;
    if let Some(last) = summary.logs.last() {
        println!("step {} loss {:.6}", last.step + 1, last.total);
    }
    println!("checkpoint {}", summary.final_checkpoint.display());
    Ok(())
}

fn cmd_infer(a: InferArgs) -> CmdResult {
    let run = load_config(a.config.as_deref())?;
    let model = match &a.checkpoint {
        Some(p) => {
            if a.seed.is_some() {
                return Err(Failure::usage("--seed only applies without --checkpoint"));
            }
            load_checkpoint(p)?
        }
        None => {
            let cfg = ModelConfig {
                seed: a.seed.unwrap_or(run.model.seed),
                ..run.model
            };
            CfdModel::new(cfg)?
        }
    };
    let seq = read_frames(&a.input)?;
    let source = match a.flow {
        Some(f) => f.into(),
        None if seq.flows.is_some() => FlowSource::Files,
        None => FlowSource::Estimate,
    };
    let flows = resolve_flows(&seq, source, run.lk)?;
    let outputs = model.infer(&seq.frames, &clip_flows(&flows))?;
    fs::create_dir_all(&a.out).map_err(|e| Failure::usage(format!("{}: {e}", a.out.display())))?;
    for (t, frame) in outputs.iter().enumerate() {
        write_png(frame, a.out.join(format!("{t:03}.png")))?;
    }
    let s = outputs[0].shape();
    println!(
        "wrote {} frames of {}x{} to {}",
        outputs.len(),
        s.h,
        s.w,
        a.out.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let outputs = read_png_dir(&a.a)?;
    let targets = read_png_dir(&a.b)?;
    let mode = match a.mode {
        ModeArg::Y => ChannelMode::Y,
        ModeArg::Rgb => ChannelMode::Rgb,
    };
    let report = evaluate(&outputs, &targets, mode)?;
    print!("{}", report.to_table());
    if let Some(p) = &a.report {
        fs::write(p, report.to_json()).map_err(|e| cfdprop::Error::File {
            path: p.clone(),
            source: e,
        })?;
    }
    Ok(())
}

fn cmd_profile(a: ProfileArgs) -> CmdResult {
    let seq = read_frames(&a.input)?;
    let row = a.row.unwrap_or(seq.size().0 / 2);
    let profile = temporal_profile(&seq.frames, row).map_err(|e| Failure::usage(e.to_string()))?;
    write_png(&profile_image(&profile), &a.out)?;
    println!(
        "wrote {}x{} profile of row {row} to {}",
        seq.len(),
        seq.size().1,
        a.out.display()
    );
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CmdResult {
    let report = run_suite(a.seed)?;
    fs::write(&a.report, report.to_json()).map_err(|e| cfdprop::Error::File {
        path: a.report.clone(),
        source: e,
    })?;
    print!("{}", report.to_text());
    if !report.passed {
        return Err(Failure {
            code: EXIT_GRADCHECK,
            message: "gradient check failed".into(),
        });
    }
    Ok(())
}

fn cmd_params(a: ParamsArgs) -> CmdResult {
    let cfg = match &a.config {
        Some(p) => load_config(Some(p))?.model,
        None => ModelConfig::default(),
    };
    let report = ParamReport::new(&CfdModel::new(cfg)?);
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        print!("{}", report.to_text());
    }
    Ok(())
}

fn init_threads() -> CmdResult {
    let Ok(value) = std::env::var("CFDPROP_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::usage(format!("CFDPROP_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure {
            code: EXIT_RUNTIME,
            message: e.to_string(),
        })
}

fn run(cli: Cli) -> CmdResult {
    init_threads()?;
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Degrade(a) => cmd_degrade(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Profile(a) => cmd_profile(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Params(a) => cmd_params(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
