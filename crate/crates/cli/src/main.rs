use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use damo_core::ablation::{ablation_set, run_ablation, Variant, ABLATION_SCENES};
use damo_core::geometry::spherical_weight_matrix;
use damo_core::gradcheck::{self, DEFAULT_CASES};
use damo_core::io::{read_pfm, read_ppm, write_pfm, write_ppm};
use damo_core::loss::{DepthMap, MaskedDepthPair};
use damo_core::metrics::{compute_metrics, MetricReport};
use damo_core::model::{build, forward, load_checkpoint, save_checkpoint, DamoConfig};
use damo_core::synth::{random_scene, render};
use damo_core::train::{train, Sample, TrainConfig, Weighting, DEFAULT_BATCH, DEFAULT_LR};
use damo_core::{Error, Result, Tensor2};

const MANIFEST: &str = "manifest.csv";
const MANIFEST_HEADER: &str = "index,seed,height,width,rgb,depth";

#[derive(Parser)]
#[command(name = "damo", version, about = "Distortion-aware depth estimation toolkit for equirectangular panoramas")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightingArg {
    Spherical,
    Uniform,
}

impl From<WeightingArg> for Weighting {
    fn from(w: WeightingArg) -> Self {
        match w {
            WeightingArg::Spherical => Weighting::Spherical,
            WeightingArg::Uniform => Weighting::Uniform,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the spherical loss-weight matrix as a PFM.
    Weights {
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
        /// Rescale so the weights average to one.
        #[arg(long)]
        normalize: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a synthetic RGB-D dataset (width is twice the height).
    Synth {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        height: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the toy network on a dataset written by `synth`.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        height: usize,
        #[arg(long)]
        epochs: usize,
        #[arg(long, value_enum, default_value = "spherical")]
        weighting: WeightingArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Loss history CSV (defaults to the checkpoint path with `.csv` appended).
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_LR)]
        lr: f64,
        #[arg(long, default_value_t = DEFAULT_BATCH)]
        batch_size: usize,
    },
    /// Print depth metrics of a prediction against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Validity mask; nonzero entries count as valid.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        no_median_scale: bool,
    },
    /// Compare every backward pass with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Check a single op.
        #[arg(long)]
        op: Option<String>,
        #[arg(long, default_value_t = DEFAULT_CASES)]
        cases: usize,
        /// Negate analytic gradients (negative control).
        #[arg(long, hide = true)]
        inject_sign_flip: bool,
    },
    /// Predict depth for one RGB image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train base and single-component variants on a fixed synthetic set.
    Ablation {
        #[arg(long, default_value_t = 16)]
        height: usize,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Domain(_) | Error::Degenerate(_) | Error::Evaluation(_) => 3,
        _ => 2,
    }
}

fn io_context(path: &Path, e: Error) -> Error {
    match e {
        Error::Io(io) => Error::Usage(format!("{}: {io}", path.display())),
        other => other,
    }
}

fn cmd_weights(height: usize, width: usize, normalize: bool, out: &Path) -> Result<()> {
    let w = spherical_weight_matrix(height, width, normalize)?;
    write_pfm(out, w.grid()).map_err(|e| io_context(out, e))
}

fn cmd_synth(seed: u64, count: usize, height: usize, out: &Path) -> Result<()> {
    if height == 0 || !height.is_multiple_of(2) {
        return Err(Error::Usage(format!("height must be even and positive, got {height}")));
    }
    fs::create_dir_all(out).map_err(|e| io_context(out, e.into()))?;
    let mut manifest = format!("{MANIFEST_HEADER}\n");
    for i in 0..count {
        let s = seed.wrapping_add(i as u64);
        let (rgb, depth) = render(&random_scene(s), height, 2 * height)?;
        let (rgb_name, depth_name) = (format!("scene_{i}.ppm"), format!("scene_{i}.pfm"));
        write_ppm(&out.join(&rgb_name), &rgb, 0).map_err(|e| io_context(out, e))?;
        write_pfm(&out.join(&depth_name), &depth.depth).map_err(|e| io_context(out, e))?;
        writeln!(manifest, "{i},{s},{height},{},{rgb_name},{depth_name}", 2 * height).expect("string write");
    }
    let path = out.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| io_context(&path, e.into()))
}

fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| io_context(&path, e.into()))?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::Format(format!("{} has an unexpected header", path.display())));
    }
    let mut data = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::Format(format!("bad manifest line {line:?}")));
        }
        let rgb_path = dir.join(fields[4]);
        let depth_path = dir.join(fields[5]);
        let rgb = read_ppm(&rgb_path).map_err(|e| io_context(&rgb_path, e))?;
        let depth = read_pfm(&depth_path).map_err(|e| io_context(&depth_path, e))?;
        if depth.dims() != [rgb.height(), rgb.width()] {
            return Err(Error::Format(format!("{line:?}: image and depth sizes differ")));
        }
        // Nonpositive depths mark holes.
        let mask = depth.map(|d| if d > 0.0 && d.is_finite() { 1.0 } else { 0.0 });
        data.push((rgb, DepthMap::new(depth, mask)?));
    }
    if data.is_empty() {
        return Err(Error::Usage(format!("{} lists no samples", path.display())));
    }
    Ok(data)
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data: &Path,
    height: usize,
    epochs: usize,
    weighting: Weighting,
    seed: u64,
    out: &Path,
    history: Option<PathBuf>,
    lr: f64,
    batch_size: usize,
) -> Result<()> {
    let samples = load_dataset(data)?;
    let model = build(&DamoConfig::new(height, seed))?;
    let cfg = TrainConfig { base_lr: lr, batch_size, weighting, ..TrainConfig::new(epochs, seed) };
    let (model, hist) = train(model, &samples, &cfg)?;
    save_checkpoint(&model, out).map_err(|e| io_context(out, e))?;
    let history = history.unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".csv");
        PathBuf::from(p)
    });
    let mut csv = String::from("epoch,mean_loss,lr\n");
    for r in &hist {
        writeln!(csv, "{},{},{}", r.epoch, r.mean_loss, r.lr).expect("string write");
    }
    fs::write(&history, csv).map_err(|e| io_context(&history, e.into()))?;
    println!("final loss {}", hist[hist.len() - 1].mean_loss);
    Ok(())
}

fn cmd_eval(pred: &Path, gt: &Path, mask: Option<&Path>, median: bool) -> Result<()> {
    let p = read_pfm(pred).map_err(|e| io_context(pred, e))?;
    let g = read_pfm(gt).map_err(|e| io_context(gt, e))?;
    let m = match mask {
        Some(path) => read_pfm(path).map_err(|e| io_context(path, e))?.map(|v| if v != 0.0 { 1.0 } else { 0.0 }),
        None => Tensor2::new_filled(g.dims(), 1.0)?,
    };
    if p.dims() != g.dims() || m.dims() != g.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?}, ground truth {:?} and mask {:?} must match",
            p.dims(),
            g.dims(),
            m.dims()
        )));
    }
    let report = compute_metrics(&MaskedDepthPair::new(p, g, m)?, median)?;
    println!("{}", MetricReport::CSV_HEADER);
    println!("{}", report.csv_row());
    Ok(())
}

fn cmd_gradcheck(seed: u64, op: Option<&str>, cases: usize, flip: bool) -> Result<bool> {
    let reports = gradcheck::run(seed, op, cases, flip)?;
    println!("{:<18} {:>6} {:>12} {:>10}  status", "op", "cases", "worst_rel", "tolerance");
    let mut all = true;
    for r in &reports {
        let ok = r.passed();
        all &= ok;
        println!(
            "{:<18} {:>6} {:>12.3e} {:>10.0e}  {}",
            r.op,
            r.cases,
            r.worst_rel_err,
            r.tolerance,
            if ok { "PASS" } else { "FAIL" }
        );
    }
    Ok(all)
}

fn cmd_infer(ckpt: &Path, rgb: &Path, out: &Path) -> Result<()> {
    let model = load_checkpoint(ckpt).map_err(|e| io_context(ckpt, e))?;
    let img = read_ppm(rgb).map_err(|e| io_context(rgb, e))?;
    let (depth, _) = forward(&model, &img)?;
    write_pfm(out, &Tensor2::from_plane(&depth, 0, 0)).map_err(|e| io_context(out, e))
}

fn cmd_ablation(height: usize, epochs: usize, seed: u64, out: Option<&Path>) -> Result<()> {
    let data = ablation_set(height)?;
    let rows = run_ablation(&data, height, epochs, seed, &Variant::ALL)?;
    let base = rows[0].final_loss;
    println!("{ABLATION_SCENES} scenes at {height}x{}, {epochs} epochs, seed {seed}", 2 * height);
    println!("{:<12} {:>12} {:>12} {:>10}", "variant", "initial", "final", "vs base");
    let mut csv = String::from("variant,initial_loss,final_loss,final_vs_base\n");
    for r in &rows {
        let rel = r.final_loss / base;
        println!("{:<12} {:>12.5} {:>12.5} {:>10.4}", r.variant.label(), r.initial_loss, r.final_loss, rel);
        writeln!(csv, "{},{},{},{}", r.variant.label(), r.initial_loss, r.final_loss, rel).expect("string write");
    }
    if let Some(path) = out {
        fs::write(path, csv).map_err(|e| io_context(path, e.into()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Weights { height, width, normalize, out } => cmd_weights(height, width, normalize, &out)?,
        Command::Synth { seed, count, height, out } => cmd_synth(seed, count, height, &out)?,
        Command::Train { data, height, epochs, weighting, seed, out, history, lr, batch_size } => {
            cmd_train(&data, height, epochs, weighting.into(), seed, &out, history, lr, batch_size)?
        }
        Command::Eval { pred, gt, mask, no_median_scale } => cmd_eval(&pred, &gt, mask.as_deref(), !no_median_scale)?,
        Command::Gradcheck { seed, op, cases, inject_sign_flip } => {
            return cmd_gradcheck(seed, op.as_deref(), cases, inject_sign_flip)
        }
        Command::Infer { ckpt, rgb, out } => cmd_infer(&ckpt, &rgb, &out)?,
        Command::Ablation { height, epochs, seed, out } => cmd_ablation(height, epochs, seed, out.as_deref())?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
