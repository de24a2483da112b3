//! `simpf` command-line tool.
//!
//! Exit codes: 0 success, 1 domain error (bad data or parameters), 2 usage or
//! I/O error.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use simpf::audio::decode_wav;
use simpf::container::{self, Spectrogram};
use simpf::features::{log_mel, MelNorm, SpectrogramConfig};
use simpf::flops::{builtin_arch, compare_report, ArchSpec, Convention};
use simpf::nn::{run_demo, save_checkpoint, DemoConfig, TrainConfig};
use simpf::render;
use simpf::simpf::{compress, CompressionSpec, TimeFrequency};
use simpf::Error;

#[derive(Parser)]
#[command(name = "simpf", version, about = "Simple pooling front-ends for log-mel spectrograms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute a log-mel spectrogram from a WAV file.
    Melspec(MelspecArgs),
    /// Compress a spectrogram container along time.
    Pool(PoolArgs),
    /// Render containers as grayscale PGM images plus one combined CSV.
    Render(RenderArgs),
    /// Print the FLOPs of an architecture with and without front-ends.
    Flops(FlopsArgs),
    /// Train the tiny CNN on synthetic audio and report accuracy and FLOPs.
    Demo(DemoArgs),
}

#[derive(Args)]
struct Output {
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Args)]
struct FeatureArgs {
    #[arg(long, default_value_t = 1024)]
    n_fft: usize,
    #[arg(long, default_value_t = 320)]
    hop: usize,
    #[arg(long, default_value_t = 64)]
    n_mels: usize,
    #[arg(long, default_value_t = 0.0)]
    f_min: f64,
    /// Defaults to the Nyquist frequency.
    #[arg(long)]
    f_max: Option<f64>,
    /// Use unnormalized triangular filters (peak 1) instead of unit area.
    #[arg(long)]
    no_mel_norm: bool,
}

impl FeatureArgs {
    fn config(&self) -> SpectrogramConfig {
        SpectrogramConfig {
            n_fft: self.n_fft,
            hop: self.hop,
            n_mels: self.n_mels,
            f_min: self.f_min,
            f_max: self.f_max,
            mel_norm: if self.no_mel_norm { MelNorm::None } else { MelNorm::Slaney },
            ..SpectrogramConfig::default()
        }
    }
}

#[derive(Args)]
struct MelspecArgs {
    wav: PathBuf,
    /// Container file to write.
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    features: FeatureArgs,
    #[command(flatten)]
    out: Output,
}

#[derive(Args)]
struct PoolArgs {
    input: PathBuf,
    /// `method:denominator`, e.g. `avg:2` or `spectral:4`.
    spec: CompressionSpec,
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    out: Output,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Directory for `<stem>.pgm` images and `spectrograms.csv`.
    #[arg(short = 'd', long, default_value = ".")]
    out_dir: PathBuf,
    #[command(flatten)]
    out: Output,
}

#[derive(Args)]
struct FlopsArgs {
    /// Bundled name (cnn10, cnn14, tinycnn) or path to an arch file.
    #[arg(long, default_value = "cnn10")]
    arch: String,
    #[arg(long, default_value_t = 1379)]
    frames: usize,
    /// `flops` (a multiply-accumulate is 2 ops) or `madds` (1 op).
    #[arg(long, default_value_t = Convention::Flops)]
    convention: Convention,
    /// Front-ends to compare against the baseline.
    specs: Vec<CompressionSpec>,
    #[command(flatten)]
    out: Output,
}

#[derive(Args)]
struct DemoArgs {
    #[arg(long, env = "SIMPF_SEED", default_value_t = 0)]
    seed: u64,
    /// Front-end applied before the network, e.g. `avg:2`.
    #[arg(long)]
    spec: Option<CompressionSpec>,
    #[arg(long, default_value_t = 100)]
    train_clips_per_class: usize,
    #[arg(long, default_value_t = 50)]
    test_clips_per_class: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    /// Also write the history CSV here.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Write the trained model checkpoint here.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    out: Output,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure { code: if e.is_domain() { 1 } else { 2 }, message: e.to_string() }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure { code: 2, message: format!("{}: {e}", path.display()) }
}

fn check_input(path: &Path) -> Result<(), Failure> {
    match std::fs::metadata(path) {
        Ok(m) if m.is_file() => Ok(()),
        Ok(_) => Err(Failure { code: 2, message: format!("{}: not a file", path.display()) }),
        Err(e) => Err(io_failure(path, e)),
    }
}

fn check_output_parent(path: &Path) -> Result<(), Failure> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if parent.is_dir() {
        Ok(())
    } else {
        Err(Failure { code: 2, message: format!("{}: output directory does not exist", parent.display()) })
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
    std::fs::write(path, bytes).map_err(|e| io_failure(path, e))
}

fn read_container(path: &Path) -> Result<Spectrogram, Failure> {
    check_input(path)?;
    let bytes = std::fs::read(path).map_err(|e| io_failure(path, e))?;
    container::decode(&bytes).map_err(|e| Failure { code: 2, message: format!("{}: {e}", path.display()) })
}

fn rows(x: &impl TimeFrequency) -> Vec<Vec<f64>> {
    x.matrix().rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Writes to stdout; a closed pipe (e.g. `| head`) ends the process quietly.
fn emit(text: &str) {
    let mut stdout = std::io::stdout().lock();
    if let Err(e) = stdout.write_all(text.as_bytes()).and_then(|()| stdout.flush()) {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        eprintln!("error: writing output: {e}");
        std::process::exit(2);
    }
}

macro_rules! say {
    ($($arg:tt)*) => { emit(&format!("{}\n", format_args!($($arg)*))) };
}

fn print_json(value: &impl Serialize) {
    say!("{}", serde_json::to_string(value).expect("JSON encoding"));
}

fn melspec(args: MelspecArgs) -> Result<(), Failure> {
    check_input(&args.wav)?;
    if let Some(out) = &args.output {
        check_output_parent(out)?;
    }
    let bytes = std::fs::read(&args.wav).map_err(|e| io_failure(&args.wav, e))?;
    let clip = decode_wav(&bytes)?;
    let mel = log_mel(&clip, &args.features.config())?;
    if let Some(out) = &args.output {
        write_file(out, container::encode(&mel.clone().into())?)?;
    }
    if args.out.json {
        print_json(&json!({
            "n_mels": mel.n_mels(),
            "n_frames": mel.n_frames(),
            "sample_rate": clip.sample_rate(),
            "n_samples": clip.len(),
            "output": args.output,
            "data": rows(&mel),
        }));
    } else {
        say!("{} x {}", mel.n_mels(), mel.n_frames());
    }
    Ok(())
}

fn pool(args: PoolArgs) -> Result<(), Failure> {
    if let Some(out) = &args.output {
        check_output_parent(out)?;
    }
    let input = read_container(&args.input)?;
    let (f, t) = input.data().dim();
    let c = compress(&input, args.spec)?;
    let (_, tp) = c.data().dim();
    if let Some(out) = &args.output {
        write_file(out, container::encode(&c.clone().into())?)?;
    }
    let ratio = tp as f64 / t as f64;
    if args.out.json {
        print_json(&json!({
            "spec": args.spec.to_string(),
            "input_shape": [f, t],
            "output_shape": [f, tp],
            "ratio": ratio,
            "output": args.output,
            "data": rows(&c),
        }));
    } else {
        say!("{f} x {t} -> {f} x {tp} ({}, frame ratio {ratio:.4})", args.spec);
    }
    Ok(())
}

fn render_cmd(args: RenderArgs) -> Result<(), Failure> {
    if !args.out_dir.is_dir() {
        return Err(Failure { code: 2, message: format!("{}: not a directory", args.out_dir.display()) });
    }
    for p in &args.inputs {
        check_input(p)?;
    }
    let mut items = Vec::with_capacity(args.inputs.len());
    for p in &args.inputs {
        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "input".into());
        items.push((stem, read_container(p)?));
    }
    let mut images = Vec::new();
    for (i, (stem, spec)) in items.iter().enumerate() {
        let name = if items[..i].iter().any(|(s, _)| s == stem) { format!("{stem}-{i}") } else { stem.clone() };
        let path = args.out_dir.join(format!("{name}.pgm"));
        write_file(&path, render::pgm(spec.data()))?;
        let (lo, hi) = spec.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        images.push(json!({
            "input": args.inputs[i],
            "pgm": path,
            "width": spec.data().ncols(),
            "height": spec.data().nrows(),
            "min": lo,
            "max": hi,
        }));
    }
    let csv_path = args.out_dir.join("spectrograms.csv");
    write_file(&csv_path, render::combined_csv(items.iter().map(|(s, x)| (s.as_str(), x.data()))))?;
    if args.out.json {
        print_json(&json!({ "images": images, "csv": csv_path }));
    } else {
        for img in &images {
            say!("{} ({} x {})", img["pgm"].as_str().unwrap_or_default(), img["width"], img["height"]);
        }
        say!("{}", csv_path.display());
    }
    Ok(())
}

fn load_arch(name: &str) -> Result<ArchSpec, Failure> {
    if let Some(arch) = builtin_arch(name) {
        return Ok(arch);
    }
    let path = Path::new(name);
    check_input(path)?;
    ArchSpec::from_file(path).map_err(Failure::from)
}

fn flops_cmd(args: FlopsArgs) -> Result<(), Failure> {
    let arch = load_arch(&args.arch)?;
    let report = compare_report(&arch, args.frames, &args.specs, args.convention)?;
    if args.out.json {
        print_json(&report);
    } else {
        emit(&report.to_string());
    }
    Ok(())
}

fn demo(args: DemoArgs) -> Result<(), Failure> {
    for path in args.history.iter().chain(args.checkpoint.iter()) {
        check_output_parent(path)?;
    }
    let cfg = DemoConfig {
        frontend: args.spec,
        train_clips_per_class: args.train_clips_per_class,
        test_clips_per_class: args.test_clips_per_class,
        train: TrainConfig {
            learning_rate: args.lr,
            batch_size: args.batch_size,
            epochs: args.epochs,
            seed: args.seed,
            ..TrainConfig::default()
        },
    };
    let report = run_demo(&cfg)?;
    let csv = report.history.to_csv();
    if let Some(path) = &args.history {
        write_file(path, &csv)?;
    }
    if let (Some(path), Some(model)) = (&args.checkpoint, &report.model) {
        save_checkpoint(path, model)?;
    }
    if args.out.json {
        print_json(&report);
    } else {
        let front = report.frontend.map(|s| s.to_string()).unwrap_or_else(|| "none".into());
        say!(
            "seed {} front-end {front}: test accuracy {:.4} ({} train / {} test clips)",
            report.seed, report.test_accuracy, report.train_clips, report.test_clips
        );
        say!(
            "model FLOPs {} at {} frames vs {} at {} frames: ratio {:.4}",
            report.flops, report.frames, report.baseline_flops, report.baseline_frames, report.flops_ratio
        );
        emit(&csv);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (json, result) = match cli.command {
        Command::Melspec(a) => (a.out.json, melspec(a)),
        Command::Pool(a) => (a.out.json, pool(a)),
        Command::Render(a) => (a.out.json, render_cmd(a)),
        Command::Flops(a) => (a.out.json, flops_cmd(a)),
        Command::Demo(a) => (a.out.json, demo(a)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            if json {
                print_json(&json!({ "error": f.message, "exit_code": f.code }));
            }
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
