use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use twoshot::focus::{brenner, find_focus};
use twoshot::imaging::{add_sensor_noise, capture_pair, generate_zstack};
use twoshot::io::{read_image, read_json, read_sample, write_image, write_json, write_pgm, write_png, write_sample, write_text};
use twoshot::nn::DEFAULT_LEARNING_RATE;
use twoshot::optics::{build_kernel, OpticalConfig};
use twoshot::phantom::{
    build_dataset, read_dataset, sample_absolute_offset, synth_phantom, write_dataset, DatasetRecipe, PhantomSpec,
};
use twoshot::pipeline::{evaluate, scan_simulate, EvalOptions, EvalReport, ScanPlan, ScanTile};
use twoshot::tsva::{infer, train, Checkpoint, TrainOptions, TrainingMeta, TsvaConfig, TsvaModel};
use twoshot::Image64;

/// Minimum mean PSNR gain of the fused output over `y1`, dB.
const ASSERT_GAIN_OVER_Y1_DB: f64 = 3.0;
/// Minimum mean PSNR gain over the single-input ablation, dB.
const ASSERT_GAIN_OVER_ABLATION_DB: f64 = 0.5;

#[derive(Parser)]
#[command(name = "twoshot", version, about = "Two-shot virtual autofocusing for whole-slide imaging")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a defocus PSF kernel as a text matrix and a 16-bit PGM.
    PsfDump(PsfDump),
    /// Synthesize a phantom specimen directory.
    Phantom(PhantomCmd),
    /// Render a two-shot capture pair and its ground truth.
    Capture(CaptureCmd),
    /// Render a z-stack of a specimen.
    Zstack(ZstackCmd),
    /// Print the Brenner score of each image.
    FocusScore(FocusScoreCmd),
    /// Print the offset of the sharpest image in a z-stack directory.
    FindFocus(FindFocusCmd),
    /// Build a patch dataset from synthetic phantoms.
    Dataset(DatasetCmd),
    /// Train a fusion network on a dataset directory.
    Train(TrainCmd),
    /// Fuse two captures with a trained checkpoint.
    Infer(InferCmd),
    /// PSNR and cell-count evaluation over a ΔD sweep.
    Eval(EvalCmd),
    /// Simulate scanning a slide tile by tile.
    ScanSim(ScanSimCmd),
}

#[derive(Args)]
struct OpticsArgs {
    #[arg(long, default_value_t = 0.75)]
    na: f64,
    #[arg(long, default_value_t = 1.0)]
    n: f64,
    #[arg(long = "lambda-um", default_value_t = 0.55)]
    lambda_um: f64,
    #[arg(long = "pitch-um", default_value_t = 0.3)]
    pitch_um: f64,
    #[arg(long, default_value_t = 15)]
    radius: usize,
}

impl OpticsArgs {
    fn config(&self) -> OpticalConfig {
        OpticalConfig {
            numerical_aperture: self.na,
            refractive_index: self.n,
            wavelength_um: self.lambda_um,
            pixel_pitch_um: self.pitch_um,
            kernel_radius_px: self.radius,
            ..OpticalConfig::default()
        }
    }
}

#[derive(Args)]
struct PsfDump {
    #[arg(long = "defocus-um", allow_hyphen_values = true)]
    defocus_um: f64,
    #[command(flatten)]
    optics: OpticsArgs,
    /// Output path prefix; `.txt` and `.pgm` are appended.
    #[arg(long, default_value = "psf")]
    out: PathBuf,
}

#[derive(Args)]
struct PhantomCmd {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 128)]
    height: usize,
    #[arg(long = "min-cells", default_value_t = 8)]
    min_cells: usize,
    #[arg(long = "max-cells", default_value_t = 16)]
    max_cells: usize,
    #[arg(long = "relief-layers", default_value_t = 5)]
    relief_layers: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CaptureCmd {
    #[arg(long)]
    sample: PathBuf,
    #[arg(long = "offset-um", allow_hyphen_values = true)]
    offset_um: f64,
    #[arg(long = "dd-um")]
    dd_um: f64,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// `pgm` (8-bit) or `png`.
    #[arg(long, default_value = "pgm")]
    format: String,
}

#[derive(Args)]
struct ZstackCmd {
    #[arg(long)]
    sample: PathBuf,
    #[arg(long = "min-um", allow_hyphen_values = true, default_value_t = -2.0)]
    min_um: f64,
    #[arg(long = "max-um", allow_hyphen_values = true, default_value_t = 2.0)]
    max_um: f64,
    #[arg(long = "step-um", default_value_t = 0.5)]
    step_um: f64,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FocusScoreCmd {
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

#[derive(Args)]
struct FindFocusCmd {
    /// Directory with `stack.json` as written by `zstack`.
    #[arg(long)]
    stack: PathBuf,
}

#[derive(Args)]
struct DatasetCmd {
    #[arg(long, default_value_t = 37)]
    phantoms: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "dd-um", default_value_t = 0.5)]
    dd_um: f64,
    #[arg(long, default_value_t = 0.005)]
    noise: f64,
    #[arg(long = "patch-px", default_value_t = 64)]
    patch_px: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainCmd {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 20)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_LEARNING_RATE)]
    lr: f64,
    #[arg(long, default_value_t = 3)]
    depth: usize,
    #[arg(long, default_value_t = 16)]
    base: usize,
    /// Train the single-input ablation (y1 fed to both paths).
    #[arg(long = "single-input")]
    single_input: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferCmd {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    y1: PathBuf,
    #[arg(long)]
    y2: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalCmd {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "ablation-ckpt")]
    ablation_ckpt: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated ΔD values, µm.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0])]
    sweep: Vec<f64>,
    /// Exit nonzero unless the fusion thresholds hold.
    #[arg(long)]
    assert: bool,
}

#[derive(Args)]
struct ScanSimCmd {
    #[arg(long)]
    tiles: usize,
    #[arg(long = "dd-um")]
    dd_um: f64,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "scan_report.json")]
    out: PathBuf,
    /// Exit nonzero unless shot totals follow the closed form and fusion beats y1.
    #[arg(long)]
    assert: bool,
}

#[derive(Serialize, Deserialize)]
struct StackEntry {
    offset_um: f64,
    file: String,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Ok(false) means an `--assert` check failed.
fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::PsfDump(a) => psf_dump(a),
        Command::Phantom(a) => phantom(a),
        Command::Capture(a) => capture(a),
        Command::Zstack(a) => zstack(a),
        Command::FocusScore(a) => focus_score(a),
        Command::FindFocus(a) => find_focus_cmd(a),
        Command::Dataset(a) => dataset(a),
        Command::Train(a) => train_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Eval(a) => eval(a),
        Command::ScanSim(a) => scan_sim(a),
    }
    .map(|ok| ok.unwrap_or(true))
}

fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn psf_dump(a: PsfDump) -> Result<Option<bool>> {
    let cfg = a.optics.config();
    let k = build_kernel::<f64>(a.defocus_um, &cfg)?;
    write_text(with_ext(&a.out, "txt"), k.samples())?;
    // scaled to the kernel peak so the image is visible
    let (_, peak) = k.samples().min_max();
    write_pgm(with_ext(&a.out, "pgm"), &k.samples().map(|v| v / peak), 16)?;
    println!("center {:.12e}", k.center());
    println!("sum {:.12e}", k.sum());
    Ok(None)
}

fn phantom(a: PhantomCmd) -> Result<Option<bool>> {
    let spec = PhantomSpec {
        seed: a.seed,
        width: a.width,
        height: a.height,
        cell_count_range: (a.min_cells, a.max_cells),
        depth_relief_layers: a.relief_layers,
        ..PhantomSpec::default()
    };
    let p = synth_phantom::<f64>(&spec)?;
    write_sample(&a.out, &p.sample)?;
    write_json(a.out.join("truth.json"), &p.truth)?;
    write_json(a.out.join("spec.json"), &spec)?;
    println!("cells {}", p.truth.cell_count);
    Ok(None)
}

fn capture(a: CaptureCmd) -> Result<Option<bool>> {
    let ext = match a.format.as_str() {
        "pgm" | "png" => a.format.as_str(),
        other => bail!("--format must be pgm or png, got {other}"),
    };
    let sample = read_sample::<f64>(&a.sample)?;
    let pair = capture_pair(&sample, a.offset_um, a.dd_um, &OpticalConfig::default())?;
    let y1 = add_sensor_noise(&pair.y1, a.noise, a.seed)?;
    let y2 = add_sensor_noise(&pair.y2, a.noise, a.seed.wrapping_add(1))?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (name, img) in [("y1", &y1), ("y2", &y2), ("gt", &pair.ground_truth)] {
        let path = a.out.join(format!("{name}.{ext}"));
        if ext == "pgm" {
            write_pgm(&path, img, 8)?;
        } else {
            write_png(&path, img)?;
        }
    }
    #[derive(Serialize)]
    struct Sidecar {
        absolute_offset_um: f64,
        delta_d_um: f64,
        y1_is_minus_side: bool,
        brenner_y1: f64,
        brenner_y2: f64,
        noise_sigma: f64,
        seed: u64,
    }
    write_json(
        a.out.join("capture.json"),
        &Sidecar {
            absolute_offset_um: a.offset_um,
            delta_d_um: a.dd_um,
            y1_is_minus_side: pair.y1_is_minus_side,
            brenner_y1: brenner(&y1)?.value,
            brenner_y2: brenner(&y2)?.value,
            noise_sigma: a.noise,
            seed: a.seed,
        },
    )?;
    Ok(None)
}

fn zstack(a: ZstackCmd) -> Result<Option<bool>> {
    let sample = read_sample::<f64>(&a.sample)?;
    let stack = generate_zstack(&sample, a.min_um, a.max_um, a.step_um, &OpticalConfig::default())?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut entries = Vec::new();
    for (i, (offset, img)) in stack.iter().enumerate() {
        let img = add_sensor_noise(img, a.noise, a.seed.wrapping_add(i as u64))?;
        let file = format!("z{i:03}.pgm");
        write_pgm(a.out.join(&file), &img, 16)?;
        entries.push(StackEntry { offset_um: *offset, file });
    }
    write_json(a.out.join("stack.json"), &entries)?;
    Ok(None)
}

fn focus_score(a: FocusScoreCmd) -> Result<Option<bool>> {
    for path in &a.images {
        let img: Image64 = read_image(path)?;
        println!("{}\t{:.12e}", path.display(), brenner(&img)?.value);
    }
    Ok(None)
}

fn find_focus_cmd(a: FindFocusCmd) -> Result<Option<bool>> {
    let entries: Vec<StackEntry> = read_json(a.stack.join("stack.json"))?;
    let stack = entries
        .iter()
        .map(|e| Ok((e.offset_um, read_image::<f64>(a.stack.join(&e.file))?)))
        .collect::<Result<Vec<_>>>()?;
    println!("{}", find_focus(&stack)?);
    Ok(None)
}

fn dataset(a: DatasetCmd) -> Result<Option<bool>> {
    let mut recipe = DatasetRecipe::standard(a.phantoms, a.seed, a.dd_um);
    recipe.noise_sigma = a.noise;
    recipe.patch_px = a.patch_px;
    let split = build_dataset::<f64>(&recipe)?;
    write_dataset(&a.out, &split)?;
    println!("train {} validation {}", split.train.len(), split.validation.len());
    Ok(None)
}

fn train_cmd(a: TrainCmd) -> Result<Option<bool>> {
    let split = read_dataset::<f64>(&a.dataset)?;
    let config = TsvaConfig {
        depth_levels: a.depth,
        base_channels: a.base,
        input_channels: 1,
        single_input: a.single_input,
    };
    let model = TsvaModel::<f64>::build(config, a.seed)?;
    let opts = TrainOptions {
        epochs: a.epochs,
        batch_size: a.batch,
        learning_rate: a.lr,
        seed: a.seed,
        ..TrainOptions::default()
    };
    let outcome = train(model, &split.train, &split.validation, &opts, |log| {
        eprintln!(
            "epoch {:3}  train {:.6}  val {:.6}  ({:.1}s)",
            log.epoch, log.train_loss, log.val_loss, log.seconds
        );
    })?;
    let resumable = outcome.best_epoch == a.epochs;
    let ckpt = Checkpoint {
        model: outcome.best,
        meta: TrainingMeta {
            seed: a.seed,
            epochs: a.epochs,
            best_epoch: outcome.best_epoch,
            delta_d_um: split.recipe.delta_d_um,
            history: outcome.history,
        },
        // moments only match the saved weights when the last epoch was best
        optimizer: resumable.then_some(outcome.optimizer),
    };
    ckpt.save(&a.out)?;
    println!("best epoch {} saved to {}", ckpt.meta.best_epoch, a.out.display());
    Ok(None)
}

fn infer_cmd(a: InferCmd) -> Result<Option<bool>> {
    let model = Checkpoint::<f64>::load(&a.ckpt)?.model;
    let y1: Image64 = read_image(&a.y1)?;
    let y2: Image64 = read_image(&a.y2)?;
    let out = infer(&model, &y1, &y2)?;
    write_image(&a.out, &out)?;
    Ok(None)
}

fn check(ok: bool, what: String) -> bool {
    println!("{} {what}", if ok { "PASS" } else { "FAIL" });
    ok
}

fn eval(a: EvalCmd) -> Result<Option<bool>> {
    let split = read_dataset::<f64>(&a.dataset)?;
    let model = Checkpoint::<f64>::load(&a.ckpt)?.model;
    let ablation = a
        .ablation_ckpt
        .as_ref()
        .map(|p| Checkpoint::<f64>::load(p).map(|c| c.model))
        .transpose()?;
    let opts = EvalOptions {
        delta_d_sweep: a.sweep.clone(),
        out_dir: Some(a.out.clone()),
        ..EvalOptions::default()
    };
    let report = evaluate(&split, &model, ablation.as_ref(), &opts)?;
    report.write_csv(a.out.join("report.csv"))?;
    report.write_summary(a.out.join("summary.json"))?;
    print_groups(&report);
    if !a.assert {
        return Ok(None);
    }
    let mut ok = true;
    if let Some(g) = report.group(split.recipe.delta_d_um) {
        let gain = g.output.mean - g.y1.mean;
        ok &= check(gain >= ASSERT_GAIN_OVER_Y1_DB, format!("gain over y1 {gain:.2} dB"));
        if let Some(ab) = g.ablation {
            let gain = g.output.mean - ab.mean;
            ok &= check(gain >= ASSERT_GAIN_OVER_ABLATION_DB, format!("gain over ablation {gain:.2} dB"));
        }
    }
    if let (Some(lo), Some(hi)) = (report.group(0.5), report.group(3.0)) {
        ok &= check(
            lo.output.mean > hi.output.mean,
            format!("ΔD 0.5 {:.2} dB > ΔD 3 {:.2} dB", lo.output.mean, hi.output.mean),
        );
    }
    Ok(Some(ok))
}

fn print_groups(report: &EvalReport) {
    println!("dd_um\trecords\ty1\ty2\toutput\tablation");
    for g in &report.groups {
        let ab = g
            .ablation
            .map(|m| format!("{:.2}±{:.2}", m.mean, m.sd))
            .unwrap_or_else(|| "-".into());
        println!(
            "{}\t{}\t{:.2}±{:.2}\t{:.2}±{:.2}\t{:.2}±{:.2}\t{ab}",
            g.delta_d_um, g.records, g.y1.mean, g.y1.sd, g.y2.mean, g.y2.sd, g.output.mean, g.output.sd
        );
    }
    for note in &report.notes {
        println!("note: {note}");
    }
}

fn scan_sim(a: ScanSimCmd) -> Result<Option<bool>> {
    let model = a
        .ckpt
        .as_ref()
        .map(|p| Checkpoint::<f64>::load(p).map(|c| c.model))
        .transpose()?;
    let tiles = (0..a.tiles)
        .map(|t| {
            let spec = PhantomSpec::with_seed(a.seed.wrapping_mul(1_000_003).wrapping_add(t as u64));
            Ok(ScanTile {
                sample: synth_phantom::<f64>(&spec)?.sample,
                absolute_offset_um: sample_absolute_offset(spec.seed),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let plan = ScanPlan::new(tiles);
    let report = scan_simulate(&plan, a.dd_um, &OpticalConfig::default(), model.as_ref())?;
    write_json(&a.out, &report)?;
    let shots = report.shots.expect("scan reports carry shot counts");
    println!(
        "tiles {}  two-shot {}  conventional {}  initial focal plane {} um",
        shots.tiles,
        shots.two_shot,
        shots.conventional,
        report.initial_focal_plane_um.unwrap_or(f64::NAN)
    );
    print_groups(&report);
    if !a.assert {
        return Ok(None);
    }
    let p = plan.shots;
    let mut ok = check(
        shots.two_shot == p.zstack_shots_first_tile + p.shots_per_tile_two_shot * (a.tiles - 1)
            && shots.conventional == p.shots_per_tile_conventional * a.tiles,
        format!("shot totals {} vs {}", shots.two_shot, shots.conventional),
    );
    if let Some(g) = report.groups.first() {
        ok &= check(
            g.output.mean > g.y1.mean,
            format!("fused {:.2} dB > y1 {:.2} dB", g.output.mean, g.y1.mean),
        );
    }
    Ok(Some(ok))
}
