//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or configuration error,
//! 3 numerical failure. Errors go to standard error as
//! `error[<kind>]: <message>`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{format_pose_text, load_pose_file, to_samples, Dataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, mean_reprojection_error, MetricReport, ROOM_THRESHOLDS, STREET_THRESHOLDS};
use crate::geom::{project, CameraIntrinsics, Point3, Pose, Quaternion};
use crate::loss::{
    beta_loss, homoscedastic_loss, position_loss, quaternion_loss, reprojection_loss, HomoscedasticParams,
    ImageBounds, LossResult, Norm, PosePrediction, ReprojectionOptions, ReprojectionOutcome,
};
use crate::model::{Activation, Regressor, RegressorConfig};
use crate::scene::{center_frame, generate_scene, CenteredFrame, Scene, SceneConfig, ScenePreset, Split};
use crate::train::{beta_sweep, sweep_csv, train, two_step_train, LossSpec, TrainConfig, TrainReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// The beta grid swept by default.
pub const DEFAULT_BETA_GRID: [f64; 6] = [100.0, 250.0, 500.0, 750.0, 1000.0, 2000.0];

#[derive(Debug, Parser)]
#[command(name = "posereg", version, about = "Camera pose regression with geometric losses")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// Seed for scene generation, sampling, initialisation and shuffling.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory for all output files (created if missing).
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Flat `key = value` training config; flags given explicitly win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scene plus centred train/test pose labels.
    SceneGen(SceneGenArgs),
    /// Train a regressor on a scene and its training labels.
    Train(TrainArgs),
    /// Evaluate a trained regressor on test labels.
    Eval(EvalArgs),
    /// Train one model per beta on a generated scene and tabulate errors.
    SweepBeta(SweepArgs),
    /// Compare analytic gradients of every loss with finite differences.
    GradCheck(GradCheckArgs),
    /// Fixed beta vs learned weighting vs two-step training on one scene.
    CompareLosses(CompareArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PresetArg {
    Room,
    Street,
}

impl PresetArg {
    fn preset(self) -> ScenePreset {
        match self {
            PresetArg::Room => ScenePreset::Room,
            PresetArg::Street => ScenePreset::Street,
        }
    }

    fn thresholds(self) -> (f64, f64) {
        match self {
            PresetArg::Room => ROOM_THRESHOLDS,
            PresetArg::Street => STREET_THRESHOLDS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LossArg {
    Beta,
    Sigma,
    Reproj,
    TwoStep,
}

#[derive(Debug, Args)]
struct SampleArgs {
    /// Scene preset.
    #[arg(long, value_enum, default_value = "room")]
    preset: PresetArg,
    /// Number of training samples.
    #[arg(long, default_value_t = 2000)]
    train_samples: usize,
    /// Number of test samples.
    #[arg(long, default_value_t = 500)]
    test_samples: usize,
}

#[derive(Debug, Args)]
struct OptimArgs {
    /// Fixed orientation weight for the beta loss [default: 500].
    #[arg(long)]
    beta: Option<f64>,
    /// Residual norm: l1, l2, huber[:delta] or tukey[:c] [default: l1].
    #[arg(long, value_parser = parse_norm)]
    norm: Option<Norm>,
    /// Maximum number of iterations [default: 20000].
    #[arg(long)]
    iters: Option<usize>,
    /// Mini-batch size [default: 64].
    #[arg(long)]
    batch: Option<usize>,
    /// ADAM learning rate [default: 1e-4].
    #[arg(long)]
    lr: Option<f64>,
    /// Train for the full iteration budget without the plateau stop.
    #[arg(long)]
    no_plateau: bool,
    /// Hidden layer widths.
    #[arg(long, value_delimiter = ',', default_value = "64,64")]
    hidden: Vec<usize>,
    /// Hidden activation.
    #[arg(long, value_parser = parse_activation, default_value = "tanh")]
    activation: Activation,
    /// Iterations of reprojection fine-tuning in two-step training.
    #[arg(long, default_value_t = 5000)]
    finetune_iters: usize,
    /// Learning rate for fine-tuning [default: --lr].
    #[arg(long)]
    finetune_lr: Option<f64>,
}

#[derive(Debug, Args)]
struct SceneGenArgs {
    #[command(flatten)]
    samples: SampleArgs,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Loss to train with [default: sigma].
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    /// Scene file [default: <out-dir>/scene.txt].
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Training labels [default: <out-dir>/train.txt].
    #[arg(long)]
    labels: Option<PathBuf>,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Scene file [default: <out-dir>/scene.txt].
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Model checkpoint [default: <out-dir>/model.ckpt].
    #[arg(long)]
    model: Option<PathBuf>,
    /// Test labels [default: <out-dir>/test.txt].
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Preset whose accuracy thresholds apply.
    #[arg(long, value_enum, default_value = "room")]
    preset: PresetArg,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    samples: SampleArgs,
    /// Comma separated beta grid.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_BETA_GRID)]
    betas: Vec<f64>,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Debug, Args)]
struct GradCheckArgs {
    /// Number of random draws per loss.
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    /// Residual norm: l1, l2, huber[:delta] or tukey[:c].
    #[arg(long, value_parser = parse_norm, default_value = "l1")]
    norm: Norm,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    samples: SampleArgs,
    #[command(flatten)]
    optim: OptimArgs,
}

fn parse_norm(s: &str) -> std::result::Result<Norm, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_activation(s: &str) -> std::result::Result<Activation, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Maps an error to its exit code.
pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Numerical(_) | Error::DegenerateHead { .. } | Error::PointAtCameraPlane { .. } => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            if e.use_stderr() {
                eprint!("error[usage]: {}", e.render());
            } else {
                let _ = e.print();
            }
            return code;
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            exit_code(&e)
        }
    }
}

fn execute(cli: &Cli) -> Result<i32> {
    let g = &cli.global;
    fs::create_dir_all(&g.out_dir).map_err(|e| Error::io(&g.out_dir, e))?;
    match &cli.command {
        Command::SceneGen(a) => scene_gen(g, a).map(|_| EXIT_OK),
        Command::Train(a) => train_cmd(g, a).map(|_| EXIT_OK),
        Command::Eval(a) => eval_cmd(g, a).map(|_| EXIT_OK),
        Command::SweepBeta(a) => sweep_cmd(g, a).map(|_| EXIT_OK),
        Command::GradCheck(a) => grad_check_cmd(g, a),
        Command::CompareLosses(a) => compare_cmd(g, a).map(|_| EXIT_OK),
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Generates a preset scene, samples both splits and moves the origin to
/// the mean training camera centre. The test split uses `seed + 1`.
pub fn prepare_scene(preset: ScenePreset, seed: u64, train_count: usize, test_count: usize) -> Result<CenteredFrame> {
    let scene = generate_scene(&SceneConfig::preset(preset, seed))?;
    let train = scene.sample_poses(train_count, seed, Split::Train)?;
    let test = scene.sample_poses(test_count, seed.wrapping_add(1), Split::Test)?;
    center_frame(&scene, &train, &test)
}

fn scene_gen(g: &GlobalArgs, a: &SceneGenArgs) -> Result<()> {
    let frame = prepare_scene(a.samples.preset.preset(), g.seed, a.samples.train_samples, a.samples.test_samples)?;
    write(&g.out_dir.join("scene.txt"), &frame.scene.to_text())?;
    for (name, samples) in [("train.txt", &frame.train), ("test.txt", &frame.test)] {
        let mut d = Dataset::from_samples(samples);
        d.scene = Some("scene.txt".into());
        d.frame_offset = Some(frame.offset);
        write(&g.out_dir.join(name), &format_pose_text(&d)?)?;
    }
    println!(
        "scene: {} points, {} anchors; {} train / {} test samples; origin moved by ({:.6}, {:.6}, {:.6})",
        frame.scene.points.len(),
        frame.scene.anchor_count(),
        frame.train.len(),
        frame.test.len(),
        frame.offset.x,
        frame.offset.y,
        frame.offset.z
    );
    Ok(())
}

/// Config file first, then explicit flags.
fn base_config(g: &GlobalArgs, o: &OptimArgs, loss: Option<LossArg>) -> Result<TrainConfig> {
    let mut c = match &g.config {
        Some(path) => TrainConfig::default().load(path)?,
        None => TrainConfig::default(),
    };
    if let Some(n) = o.iters {
        c.max_iterations = n;
    }
    c.seed = g.seed;
    if let Some(lr) = o.lr {
        c.adam.learning_rate = lr;
    }
    if let Some(b) = o.batch {
        c.batch_size = b;
    }
    if o.no_plateau {
        c.plateau = None;
    }
    let norm = o.norm.unwrap_or(c.loss.norm());
    let beta = o.beta.unwrap_or(match c.loss {
        LossSpec::Beta { beta, .. } => beta,
        _ => 500.0,
    });
    let init = match c.loss {
        LossSpec::Homoscedastic { init, .. } => init,
        _ => HomoscedasticParams::default(),
    };
    let options = match c.loss {
        LossSpec::Reprojection { options, .. } => options,
        _ => ReprojectionOptions::default(),
    };
    c.loss = match loss {
        Some(LossArg::Beta) => LossSpec::Beta { beta, norm },
        Some(LossArg::Sigma) | Some(LossArg::TwoStep) => LossSpec::Homoscedastic { init, norm },
        Some(LossArg::Reproj) => LossSpec::Reprojection { norm, options },
        None => match c.loss {
            LossSpec::Beta { .. } => LossSpec::Beta { beta, norm },
            LossSpec::Homoscedastic { .. } => LossSpec::Homoscedastic { init, norm },
            LossSpec::Reprojection { .. } => LossSpec::Reprojection { norm, options },
        },
    };
    c.validate()?;
    Ok(c)
}

fn finetune_config(base: &TrainConfig, o: &OptimArgs) -> TrainConfig {
    let mut c = base.clone();
    c.max_iterations = o.finetune_iters;
    c.adam.learning_rate = o.finetune_lr.unwrap_or(base.adam.learning_rate);
    c.loss = LossSpec::Reprojection {
        norm: base.loss.norm(),
        options: ReprojectionOptions::default(),
    };
    c
}

fn new_model(input_dim: usize, o: &OptimArgs, seed: u64) -> Result<Regressor> {
    Regressor::new(
        RegressorConfig::new(input_dim)
            .with_hidden(&o.hidden)
            .with_activation(o.activation)
            .with_seed(seed),
    )
}

fn warn_skipped(report: &TrainReport) {
    if report.skipped_batches > 0 {
        eprintln!(
            "warning: {} batches had no usable reprojection point ({} samples skipped)",
            report.skipped_batches, report.skipped_samples
        );
    }
}

fn describe(name: &str, report: &TrainReport) {
    let last = report.loss_trace.last().copied().unwrap_or(f64::NAN);
    let mut line = format!("{name}: {} iterations, final batch loss {last:.6e}", report.iterations);
    if report.converged {
        line.push_str(", plateau reached");
    }
    if let Some(s) = report.final_s {
        let _ = write!(line, ", s_x = {:.4}, s_q = {:.4}", s.log_var_position, s.log_var_orientation);
    }
    println!("{line}");
}

fn train_cmd(g: &GlobalArgs, a: &TrainArgs) -> Result<()> {
    let scene_path = a.scene.clone().unwrap_or_else(|| g.out_dir.join("scene.txt"));
    let label_path = a.labels.clone().unwrap_or_else(|| g.out_dir.join("train.txt"));
    let scene = Scene::load(&scene_path)?;
    let samples = to_samples(&load_pose_file(&label_path)?, &scene)?;
    if samples.is_empty() {
        return Err(Error::Config(format!("{} holds no labels", label_path.display())));
    }
    let config = base_config(g, &a.optim, a.loss)?;
    let mut model = new_model(scene.observation_dim(), &a.optim, g.seed)?;
    if a.loss == Some(LossArg::TwoStep) {
        let fine = finetune_config(&config, &a.optim);
        let r = two_step_train(&mut model, &samples, &scene, &config, &fine)?;
        warn_skipped(&r.finetune);
        describe("pretrain", &r.pretrain);
        println!("fine-tune initial reprojection loss {:.6e}", r.finetune_initial_loss);
        describe("fine-tune", &r.finetune);
        write(&g.out_dir.join("trace.csv"), &r.pretrain.trace_csv())?;
        write(&g.out_dir.join("finetune-trace.csv"), &r.finetune.trace_csv())?;
    } else {
        let r = train(&mut model, &samples, Some(&scene), &config)?;
        warn_skipped(&r);
        describe("train", &r);
        write(&g.out_dir.join("trace.csv"), &r.trace_csv())?;
    }
    model.save(g.out_dir.join("model.ckpt"))
}

fn eval_cmd(g: &GlobalArgs, a: &EvalArgs) -> Result<()> {
    let scene = Scene::load(a.scene.clone().unwrap_or_else(|| g.out_dir.join("scene.txt")))?;
    let model = Regressor::load(a.model.clone().unwrap_or_else(|| g.out_dir.join("model.ckpt")))?;
    let samples = to_samples(
        &load_pose_file(a.labels.clone().unwrap_or_else(|| g.out_dir.join("test.txt")))?,
        &scene,
    )?;
    if model.config().input_dim != scene.observation_dim() {
        return Err(Error::Config(format!(
            "model expects {} inputs but the scene produces {}",
            model.config().input_dim,
            scene.observation_dim()
        )));
    }
    let report = evaluate(&model, &samples, a.preset.thresholds())?;
    write(&g.out_dir.join("eval.csv"), &report.to_csv()?)?;
    let reprojection = mean_reprojection_error(&model, &samples, &scene, &Norm::L2)?;
    println!(
        "median error {:.4} m, {:.4} deg; accuracy {:.1}% ; mean reprojection error {}",
        report.median_position_m,
        report.median_orientation_deg,
        100.0 * report.accuracy(),
        reprojection.map_or("n/a".to_owned(), |e| format!("{e:.6e}"))
    );
    Ok(())
}

fn sweep_cmd(g: &GlobalArgs, a: &SweepArgs) -> Result<()> {
    let frame = prepare_scene(a.samples.preset.preset(), g.seed, a.samples.train_samples, a.samples.test_samples)?;
    let config = base_config(g, &a.optim, Some(LossArg::Beta))?;
    let dim = frame.scene.observation_dim();
    let rows = beta_sweep(
        || new_model(dim, &a.optim, g.seed),
        &frame.train,
        &frame.test,
        &a.betas,
        &config,
        a.samples.preset.thresholds(),
    )?;
    for r in &rows {
        println!(
            "beta {:>8}: median {:.4} m, {:.4} deg",
            r.beta, r.median_position_m, r.median_orientation_deg
        );
    }
    write(&g.out_dir.join("sweep.csv"), &sweep_csv(&rows))
}

/// One row of the loss comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub loss: String,
    pub report: MetricReport,
    pub mean_reprojection_error: Option<f64>,
}

fn compare_cmd(g: &GlobalArgs, a: &CompareArgs) -> Result<()> {
    let preset = a.samples.preset;
    let frame = prepare_scene(preset.preset(), g.seed, a.samples.train_samples, a.samples.test_samples)?;
    let dim = frame.scene.observation_dim();
    let beta_cfg = base_config(g, &a.optim, Some(LossArg::Beta))?;
    let sigma_cfg = base_config(g, &a.optim, Some(LossArg::Sigma))?;
    let fine_cfg = finetune_config(&sigma_cfg, &a.optim);
    let measure = |name: String, model: &Regressor| -> Result<ComparisonRow> {
        Ok(ComparisonRow {
            loss: name,
            report: evaluate(model, &frame.test, preset.thresholds())?,
            mean_reprojection_error: mean_reprojection_error(model, &frame.test, &frame.scene, &Norm::L2)?,
        })
    };

    let mut rows = Vec::new();
    let mut model = new_model(dim, &a.optim, g.seed)?;
    train(&mut model, &frame.train, None, &beta_cfg)?;
    let beta = match beta_cfg.loss {
        LossSpec::Beta { beta, .. } => beta,
        _ => unreachable!("beta config"),
    };
    rows.push(measure(format!("linear sum, beta={beta}"), &model)?);

    let mut model = new_model(dim, &a.optim, g.seed)?;
    let r = train(&mut model, &frame.train, None, &sigma_cfg)?;
    rows.push(measure("learned weighting".into(), &model)?);

    let fine = train(&mut model, &frame.train, Some(&frame.scene), &fine_cfg)?;
    warn_skipped(&fine);
    rows.push(measure("learned weighting, then reprojection".into(), &model)?);

    let (tx, tq) = preset.thresholds();
    let mut table = format!(
        "{:<40} {:>12} {:>12} {:>16} {:>18}\n",
        "loss", "median m", "median deg", format!("acc <{tx}m,{tq}deg"), "mean reprojection"
    );
    let mut csv = String::from("loss,median_pos_err_m,median_ori_err_deg,accuracy,mean_reprojection_error\n");
    for row in &rows {
        let reproj = row.mean_reprojection_error.map_or("n/a".to_owned(), |e| format!("{e:.6e}"));
        let _ = writeln!(
            table,
            "{:<40} {:>12.4} {:>12.4} {:>15.1}% {:>18}",
            row.loss,
            row.report.median_position_m,
            row.report.median_orientation_deg,
            100.0 * row.report.accuracy(),
            reproj
        );
        let _ = writeln!(
            csv,
            "{},{:.16e},{:.16e},{:.16e},{}",
            row.loss.replace(',', ";"),
            row.report.median_position_m,
            row.report.median_orientation_deg,
            row.report.accuracy(),
            row.mean_reprojection_error.map_or(String::new(), |e| format!("{e:.16e}"))
        );
    }
    if let Some(s) = r.final_s {
        let _ = writeln!(
            table,
            "learned s_x = {:.4}, s_q = {:.4}",
            s.log_var_position, s.log_var_orientation
        );
    }
    print!("{table}");
    write(&g.out_dir.join("compare.csv"), &csv)
}

/// Largest finite-difference disagreement seen for one loss.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckRow {
    pub loss: &'static str,
    pub max_relative_error: f64,
    pub draws: usize,
    /// Draws skipped because a residual sat next to a kink of the norm.
    pub excluded: usize,
}

/// Largest relative error any loss may show.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-5;

const FD_STEP: f64 = 1e-6;
const KINK_MARGIN: f64 = 1e-4;

#[derive(Clone, Copy)]
enum CheckedLoss {
    Position,
    Orientation,
    Beta,
    Homoscedastic,
    Reprojection,
}

impl CheckedLoss {
    const ALL: [CheckedLoss; 5] = [
        CheckedLoss::Position,
        CheckedLoss::Orientation,
        CheckedLoss::Beta,
        CheckedLoss::Homoscedastic,
        CheckedLoss::Reprojection,
    ];

    fn name(self) -> &'static str {
        match self {
            CheckedLoss::Position => "position",
            CheckedLoss::Orientation => "orientation",
            CheckedLoss::Beta => "beta",
            CheckedLoss::Homoscedastic => "homoscedastic",
            CheckedLoss::Reprojection => "reprojection",
        }
    }
}

struct Draw {
    model: Regressor,
    observation: Vec<f64>,
    gt: Pose,
    k: CameraIntrinsics,
    points: Vec<Point3<f64>>,
    s: HomoscedasticParams,
    beta: f64,
}

fn random_draw(rng: &mut ChaCha8Rng, index: u64) -> Result<Draw> {
    let mut model = Regressor::new(RegressorConfig::new(12).with_hidden(&[8, 8]).with_seed(index))?;
    let q = Quaternion::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    )
    .normalize()?
    .canonicalize()?;
    let gt = Pose::new(Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)), q)?;
    // predictions start close to the label so every point stays in front
    let head = model.parameter_count() - 8 * 7 - 7;
    for w in &mut model.parameters_mut()[head..head + 8 * 7] {
        *w *= 0.1;
    }
    model.set_head_bias(&gt.position, &q.to_vector());
    let k = CameraIntrinsics::new(
        rng.random_range(0.5..2.0),
        rng.random_range(0.5..2.0),
        rng.random_range(-0.2..0.2),
        rng.random_range(-0.2..0.2),
        rng.random_range(-0.1..0.1),
    )?;
    let r = gt.rotation();
    let points = (0..20)
        .map(|_| {
            let depth = rng.random_range(2.0..6.0);
            let cam = Vector3::new(
                rng.random_range(-0.5..0.5) * depth,
                rng.random_range(-0.5..0.5) * depth,
                depth,
            );
            Point3::from(r.transpose() * (cam - gt.position))
        })
        .collect();
    Ok(Draw {
        model,
        observation: (0..12).map(|_| rng.random_range(-1.0..1.0)).collect(),
        gt,
        k,
        points,
        s: HomoscedasticParams::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0))?,
        beta: rng.random_range(1.0..1000.0),
    })
}

fn evaluate_loss(kind: CheckedLoss, d: &Draw, model: &Regressor, s: &HomoscedasticParams, norm: &Norm) -> Result<(LossResult, PosePrediction)> {
    let out = model.forward(&d.observation)?;
    let pred = out.prediction;
    let loss = match kind {
        CheckedLoss::Position => position_loss(&d.gt.position, &pred.position, norm),
        CheckedLoss::Orientation => quaternion_loss(&d.gt.orientation, &pred.quaternion_raw, norm)?,
        CheckedLoss::Beta => beta_loss(&d.gt, &pred, d.beta, norm)?,
        CheckedLoss::Homoscedastic => homoscedastic_loss(&d.gt, &pred, s, norm)?,
        CheckedLoss::Reprojection => {
            let options = ReprojectionOptions {
                bounds: ImageBounds::symmetric(f64::INFINITY, f64::INFINITY),
                ..Default::default()
            };
            match reprojection_loss(&d.gt, &pred, &d.k, &d.points, norm, &options)? {
                ReprojectionOutcome::Evaluated { loss, .. } => loss,
                ReprojectionOutcome::Skipped => {
                    return Err(Error::Numerical("grad-check draw lost every point".into()))
                }
            }
        }
    };
    Ok((loss, pred))
}

fn near_kink(kind: CheckedLoss, d: &Draw, pred: &PosePrediction, norm: &Norm) -> Result<bool> {
    let position: Vec<f64> = (pred.position - d.gt.position).iter().copied().collect();
    let q_hat = pred.quaternion_raw / pred.quaternion_raw.norm();
    let orientation: Vec<f64> = (q_hat - d.gt.orientation.to_vector()).iter().copied().collect();
    let near = |r: &[f64]| norm.near_kink(r, KINK_MARGIN);
    Ok(match kind {
        CheckedLoss::Position => near(&position),
        CheckedLoss::Orientation => near(&orientation),
        CheckedLoss::Beta | CheckedLoss::Homoscedastic => near(&position) || near(&orientation),
        CheckedLoss::Reprojection => {
            let q = Quaternion::from_vector(&q_hat);
            let p = Pose::new(pred.position, q)?;
            let mut any = false;
            for g in &d.points {
                let (a, _) = project(&d.gt, &d.k, g)?;
                let (b, _) = project(&p, &d.k, g)?;
                any |= near(&[b.x - a.x, b.y - a.y]);
            }
            any
        }
    })
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Checks every loss composed with a small regressor against central
/// differences of step 1e-6 over all network parameters (and the
/// log-variances for the learned weighting).
pub fn grad_check(draws: usize, norm: Norm, seed: u64) -> Result<Vec<GradCheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<GradCheckRow> = CheckedLoss::ALL
        .iter()
        .map(|k| GradCheckRow {
            loss: k.name(),
            max_relative_error: 0.0,
            draws: 0,
            excluded: 0,
        })
        .collect();
    for i in 0..draws {
        let d = random_draw(&mut rng, seed.wrapping_add(i as u64))?;
        for (kind, row) in CheckedLoss::ALL.iter().zip(rows.iter_mut()) {
            let (loss, pred) = evaluate_loss(*kind, &d, &d.model, &d.s, &norm)?;
            if near_kink(*kind, &d, &pred, &norm)? {
                row.excluded += 1;
                continue;
            }
            let out = d.model.forward(&d.observation)?;
            let mut analytic = d.model.backward(&out.tape, &loss.grad_position, &loss.grad_quaternion_raw)?;
            if let Some(gs) = loss.grad_s {
                analytic.extend_from_slice(&gs);
            }
            let mut numeric = Vec::with_capacity(analytic.len());
            let mut probe = d.model.clone();
            for j in 0..d.model.parameter_count() {
                let p0 = probe.parameters()[j];
                probe.parameters_mut()[j] = p0 + FD_STEP;
                let up = evaluate_loss(*kind, &d, &probe, &d.s, &norm)?.0.value;
                probe.parameters_mut()[j] = p0 - FD_STEP;
                let down = evaluate_loss(*kind, &d, &probe, &d.s, &norm)?.0.value;
                probe.parameters_mut()[j] = p0;
                numeric.push((up - down) / (2.0 * FD_STEP));
            }
            if loss.grad_s.is_some() {
                for axis in 0..2 {
                    let shifted = |h: f64| {
                        let mut s = d.s;
                        if axis == 0 {
                            s.log_var_position += h;
                        } else {
                            s.log_var_orientation += h;
                        }
                        evaluate_loss(*kind, &d, &d.model, &s, &norm).map(|r| r.0.value)
                    };
                    numeric.push((shifted(FD_STEP)? - shifted(-FD_STEP)?) / (2.0 * FD_STEP));
                }
            }
            row.draws += 1;
            row.max_relative_error = row.max_relative_error.max(relative_error(&analytic, &numeric));
        }
    }
    Ok(rows)
}

fn grad_check_cmd(g: &GlobalArgs, a: &GradCheckArgs) -> Result<i32> {
    if a.samples == 0 {
        return Err(Error::Config("grad-check needs at least one sample".into()));
    }
    let rows = grad_check(a.samples, a.norm, g.seed)?;
    let mut csv = String::from("loss,max_relative_error,draws,excluded\n");
    let mut ok = true;
    for r in &rows {
        let pass = r.max_relative_error <= GRAD_CHECK_TOLERANCE && r.draws > 0;
        ok &= pass;
        println!(
            "{:<14} max relative error {:.3e} over {} draws ({} near a kink) {}",
            r.loss,
            r.max_relative_error,
            r.draws,
            r.excluded,
            if pass { "ok" } else { "FAIL" }
        );
        let _ = writeln!(csv, "{},{:.6e},{},{}", r.loss, r.max_relative_error, r.draws, r.excluded);
    }
    write(&g.out_dir.join("grad-check.csv"), &csv)?;
    if ok {
        Ok(EXIT_OK)
    } else {
        eprintln!("error[numerical]: gradient check exceeded {GRAD_CHECK_TOLERANCE:e}");
        Ok(EXIT_NUMERICAL)
    }
}
