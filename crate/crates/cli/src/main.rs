//! Batch command-line surface over the codec: training, coding round
//! trips, quality metrics, energy accounting, and latent statistics.
//!
//! Every subcommand is non-interactive and deterministic given its flags
//! and seeds. Exit codes: 0 success, 1 usage or configuration, 2 data or
//! I/O, 3 numeric failure.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use sapm_core::checkpoint::load_checkpoint;
use sapm_core::codec::{bpp, compress, decompress};
use sapm_core::config::{parse_config, ModelConfig, TrainConfig};
use sapm_core::energy::{energy_report, render_csv, render_text, CostModel, EnergyMode};
use sapm_core::error::{Result, SapmError};
use sapm_core::metrics::{ms_ssim, psnr};
use sapm_core::model::Model;
use sapm_core::ppm::{read_ppm, write_ppm, Image};
use sapm_core::stats::{analyze_latents, render_plot_csv, render_summary};
use sapm_core::trainer::{train, Dataset};

#[derive(Parser)]
#[command(
    name = "sapm",
    version,
    about = "Multiplication-reduced learned image codec"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write checkpoint plus loss log.
    Train(TrainArgs),
    /// Compress a PPM image to a .sapm bitstream.
    Compress(CodecArgs),
    /// Decompress a .sapm bitstream back to PPM.
    Decompress(CodecArgs),
    /// Round-trip images in memory and report bpp, PSNR, and MS-SSIM.
    Eval(EvalArgs),
    /// Static energy accounting against an all-conv baseline.
    Energy(EnergyArgs),
    /// Fit Gaussian and Laplace distributions to the latent channels.
    Stats(StatsArgs),
    /// Rate-distortion rows across a directory of checkpoints.
    RdCurve(RdCurveArgs),
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Key-value config file; unset fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of training PPMs (overrides the config file).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for checkpoint and log.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    crop: Option<usize>,
    /// Checkpoint to fine-tune from.
    #[arg(long)]
    pretrained: Option<PathBuf>,
    #[arg(long)]
    log_every: Option<usize>,
}

#[derive(clap::Args)]
struct CodecArgs {
    /// Model checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// One or more PPM images.
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
}

#[derive(clap::Args)]
struct EnergyArgs {
    /// Model config file; defaults when absent (weights are irrelevant
    /// to static accounting).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Accounting mode: paper (main branches only) or full.
    #[arg(long, default_value = "paper")]
    mode: String,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    /// Write the rows as CSV here in addition to the table on stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct StatsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of PPM images to push through the encoder.
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated latent channel indices; all channels when absent.
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<usize>>,
    /// Round latents and compare by integer bin mass instead of density.
    #[arg(long)]
    quantized: bool,
    /// Write per-bin plot data as CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct RdCurveArgs {
    /// Directory of lambda<N>.ckpt checkpoints.
    #[arg(long)]
    checkpoints: PathBuf,
    /// Directory of PPM images to evaluate on.
    #[arg(long)]
    data: PathBuf,
    /// Write the rows as CSV here in addition to the table on stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests land here too; they are not errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train(a) => run_train(a),
        Cmd::Compress(a) => run_compress(a),
        Cmd::Decompress(a) => run_decompress(a),
        Cmd::Eval(a) => run_eval(a),
        Cmd::Energy(a) => run_energy(a),
        Cmd::Stats(a) => run_stats(a),
        Cmd::RdCurve(a) => run_rd_curve(a),
    }
}

fn load_configs(path: Option<&Path>) -> Result<(ModelConfig, TrainConfig)> {
    match path {
        None => Ok((ModelConfig::default(), TrainConfig::default())),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| SapmError::io(format!("{}: {e}", p.display())))?;
            parse_config(&text)
        }
    }
}

fn run_train(a: TrainArgs) -> Result<()> {
    let (cfg, mut tc) = load_configs(a.config.as_deref())?;
    if let Some(v) = a.lambda {
        tc.lambda = v;
    }
    if let Some(v) = a.seed {
        tc.seed = v;
    }
    if let Some(v) = a.iters {
        tc.iters = v;
    }
    if let Some(v) = a.lr {
        tc.lr = v;
    }
    if let Some(v) = a.batch {
        tc.batch = v;
    }
    if let Some(v) = a.crop {
        tc.crop = v;
    }
    if let Some(v) = a.pretrained {
        tc.pretrained = Some(v);
    }
    if let Some(v) = a.log_every {
        tc.log_every = v;
    }
    if let Some(v) = a.data {
        tc.dataset = v;
    }
    if tc.dataset.as_os_str().is_empty() {
        return Err(SapmError::config(
            "no dataset: pass --data or set dataset= in the config",
        ));
    }

    let dataset = Dataset::load_dir(&tc.dataset)?;
    println!(
        "training lambda={} iters={} on {} images from {}",
        tc.lambda,
        tc.iters,
        dataset.len(),
        tc.dataset.display()
    );
    let every = tc.log_every;
    let outcome = train(&cfg, &tc, &dataset, &a.out, |it, terms| {
        if it % every == 0 {
            println!(
                "iter={it} loss={:.6} d={:.8} ry={:.6} rz={:.6}",
                terms.loss, terms.d, terms.r_y, terms.r_z
            );
        }
    })?;
    println!("checkpoint: {}", outcome.checkpoint_path.display());
    println!("log: {}", outcome.log_path.display());
    Ok(())
}

fn run_compress(a: CodecArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let img = read_ppm(&a.input)?;
    let c = compress(&model, &img)?;
    std::fs::write(&a.out, &c.bytes)
        .map_err(|e| SapmError::io(format!("{}: {e}", a.out.display())))?;
    println!(
        "wrote {}: {} bytes, {:.4} bpp, estimated rate {:.1} bits",
        a.out.display(),
        c.bytes.len(),
        bpp(c.bytes.len(), img.w, img.h),
        c.rate_bits
    );
    Ok(())
}

fn run_decompress(a: CodecArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let bytes = std::fs::read(&a.input)
        .map_err(|e| SapmError::io(format!("{}: {e}", a.input.display())))?;
    let d = decompress(&model, &bytes)?;
    write_ppm(&a.out, &d.image)?;
    println!("wrote {}: {}x{}", a.out.display(), d.image.w, d.image.h);
    Ok(())
}

/// One image's round-trip quality figures.
fn eval_one(model: &Model, img: &Image) -> Result<(usize, f64, f64, f64, usize)> {
    let c = compress(model, img)?;
    let d = decompress(model, &c.bytes)?;
    let p = psnr(img, &d.image)?;
    let m = ms_ssim(img, &d.image)?;
    Ok((
        c.bytes.len(),
        bpp(c.bytes.len(), img.w, img.h),
        p,
        m.value,
        m.scales,
    ))
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    println!(
        "{:<24} {:>10} {:>8} {:>9} {:>9} {:>7}",
        "file", "bytes", "bpp", "psnr_db", "ms_ssim", "scales"
    );
    let mut sums = (0.0, 0.0, 0.0);
    for path in &a.input {
        let img = read_ppm(path)?;
        let (bytes, rate, p, m, scales) = eval_one(&model, &img)?;
        let name = path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        println!("{name:<24} {bytes:>10} {rate:>8.4} {p:>9.3} {m:>9.4} {scales:>7}");
        sums = (sums.0 + rate, sums.1 + p, sums.2 + m);
    }
    if a.input.len() > 1 {
        let n = a.input.len() as f64;
        println!(
            "{:<24} {:>10} {:>8.4} {:>9.3} {:>9.4}",
            "mean",
            "",
            sums.0 / n,
            sums.1 / n,
            sums.2 / n
        );
    }
    Ok(())
}

fn run_energy(a: EnergyArgs) -> Result<()> {
    let cfg = match a.config.as_deref() {
        None => ModelConfig::default(),
        Some(p) => load_configs(Some(p))?.0,
    };
    let model = Model::new(cfg)?;
    let mode = EnergyMode::parse(&a.mode)?;
    let report = energy_report(&model, a.height, a.width, mode, &CostModel::default())?;
    print!("{}", render_text(&report));
    if let Some(out) = a.out {
        std::fs::write(&out, render_csv(&report))
            .map_err(|e| SapmError::io(format!("{}: {e}", out.display())))?;
        println!("csv: {}", out.display());
    }
    Ok(())
}

fn run_stats(a: StatsArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let dataset = Dataset::load_dir(&a.data)?;
    let reports = analyze_latents(&model, dataset.images(), a.channels.as_deref(), a.quantized)?;
    print!("{}", render_summary(&reports));
    if let Some(out) = a.out {
        std::fs::write(&out, render_plot_csv(&reports))
            .map_err(|e| SapmError::io(format!("{}: {e}", out.display())))?;
        println!("csv: {}", out.display());
    }
    Ok(())
}

/// Checkpoints named `lambda<value>.ckpt`, ordered by the value.
fn rd_checkpoints(dir: &Path) -> Result<Vec<(f64, PathBuf)>> {
    let mut out = Vec::new();
    let entries =
        std::fs::read_dir(dir).map_err(|e| SapmError::io(format!("{}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry.map_err(|e| SapmError::io(e.to_string()))?.path();
        if path.extension().is_none_or(|e| e != "ckpt") {
            continue;
        }
        let stem = path
            .file_stem()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned();
        let lambda = stem
            .strip_prefix("lambda")
            .and_then(|s| s.parse::<f64>().ok())
            .ok_or_else(|| {
                SapmError::config(format!(
                    "checkpoint {} is not named lambda<value>.ckpt",
                    path.display()
                ))
            })?;
        out.push((lambda, path));
    }
    if out.is_empty() {
        return Err(SapmError::config(format!(
            "no .ckpt files under {}",
            dir.display()
        )));
    }
    out.sort_by(|x, y| x.0.total_cmp(&y.0));
    Ok(out)
}

fn run_rd_curve(a: RdCurveArgs) -> Result<()> {
    let points = rd_checkpoints(&a.checkpoints)?;
    let dataset = Dataset::load_dir(&a.data)?;
    println!(
        "{:<10} {:>8} {:>9} {:>9}",
        "lambda", "bpp", "psnr_db", "ms_ssim"
    );
    let mut csv = String::from("lambda,bpp,psnr_db,ms_ssim\n");
    for (lambda, path) in &points {
        let model = load_checkpoint(path)?;
        let (mut rate, mut p, mut m) = (0.0, 0.0, 0.0);
        for img in dataset.images() {
            let (_, r1, p1, m1, _) = eval_one(&model, img)?;
            rate += r1;
            p += p1;
            m += m1;
        }
        let n = dataset.len() as f64;
        let (rate, p, m) = (rate / n, p / n, m / n);
        println!("{lambda:<10} {rate:>8.4} {p:>9.3} {m:>9.4}");
        csv.push_str(&format!("{lambda},{rate:.6},{p:.4},{m:.6}\n"));
    }
    if let Some(out) = a.out {
        std::fs::write(&out, csv).map_err(|e| SapmError::io(format!("{}: {e}", out.display())))?;
        println!("csv: {}", out.display());
    }
    Ok(())
}
